/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_distances: (a: number, b: number) => [number, number, number, number];
export const demo_edge_response: (a: number, b: number) => [number, number, number, number];
export const demo_heights: (a: number) => [number, number];
export const demo_kernel_at: (a: number, b: number, c: number) => [number, number, number, number];
export const demo_new: (a: number, b: number) => [number, number, number];
export const demo_pattern: (a: number) => [number, number];
export const demo_side: (a: number) => number;
export const demo_vertex: (a: number, b: number, c: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
