/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_treedemo_free: (a: number, b: number) => void;
export const cluster_steps: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const rebase_allocation: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const treedemo_new: (a: number, b: number, c: number) => [number, number, number];
export const treedemo_prune: (a: number, b: number, c: number) => [number, number, number, number];
export const treedemo_tree: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
