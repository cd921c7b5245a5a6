/* tslint:disable */
/* eslint-disable */

export function cell_lookup(lat: number, lon: number, t: number): string;

export function compare_training(seed: number, rounds: number, n_facilities: number): string;

export function demand_heatmap(seed: number, n_facilities: number, hour: number): string;

/**
 * Default grid geometry for the page: origin, cell size and shape.
 */
export function grid_info(): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly cell_lookup: (a: number, b: number, c: number) => [number, number, number, number];
    readonly compare_training: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demand_heatmap: (a: number, b: number, c: number) => [number, number, number, number];
    readonly grid_info: () => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
