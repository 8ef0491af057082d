/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Geodesic distance from `source` to every vertex.
     */
    distances(source: number): Float64Array;
    /**
     * Response of the edge filter at `orientation` radians to the square.
     */
    edge_response(orientation: number): Float64Array;
    /**
     * Per-vertex heights, for shading.
     */
    heights(): Float64Array;
    /**
     * The edge kernel transported to `centre` and turned by `rotation`
     * radians, as a per-vertex image.
     */
    kernel_at(centre: number, rotation: number): Float64Array;
    /**
     * A `side × side` grid with a centred bump of the given height. The
     * direction field radiates from the corner at the origin.
     */
    constructor(side: number, height: number);
    /**
     * The square input pattern the edge filter runs on.
     */
    pattern(): Float64Array;
    side(): number;
    /**
     * Vertex id of grid cell `(i, j)`, row-major in `j`.
     */
    vertex(i: number, j: number): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_distances: (a: number, b: number) => [number, number, number, number];
    readonly demo_edge_response: (a: number, b: number) => [number, number, number, number];
    readonly demo_heights: (a: number) => [number, number];
    readonly demo_kernel_at: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_new: (a: number, b: number) => [number, number, number];
    readonly demo_pattern: (a: number) => [number, number];
    readonly demo_side: (a: number) => number;
    readonly demo_vertex: (a: number, b: number, c: number) => number;
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
