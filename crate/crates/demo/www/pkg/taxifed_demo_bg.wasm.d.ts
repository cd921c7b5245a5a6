/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const cell_lookup: (a: number, b: number, c: number) => [number, number, number, number];
export const compare_training: (a: number, b: number, c: number) => [number, number, number, number];
export const demand_heatmap: (a: number, b: number, c: number) => [number, number, number, number];
export const grid_info: () => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
