// transformers.js is an optional runtime dependency, loaded dynamically so
// the exporter (and its stub encoder) work without it installed
declare module "@huggingface/transformers" {
  export function pipeline(task: string, model?: string, options?: Record<string, unknown>): Promise<any>;
}
