/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const corruption_preview: (a: bigint, b: number, c: number) => [number, number, number, number];
export const ema_impulse: (a: number, b: number) => [number, number, number, number];
export const filter_response: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const preview_size: () => number;
export const schedule: (a: number, b: number, c: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
