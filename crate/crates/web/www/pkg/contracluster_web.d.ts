/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    accuracy(): number;
    assignments(): Uint32Array;
    cluster(k: number, n_proto: number): void;
    labels(): Uint32Array;
    constructor(rings: boolean, classes: number, per_class: number, warp: number, elongation: number, seed: number);
    points(): Float64Array;
    project(method: string, n_neighbors: number): void;
    prototypes(): Uint32Array;
    /**
     * Returns the sweep table as `label,silhouette` lines.
     */
    sweep(k: number, neighbors: Uint32Array): string;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_accuracy: (a: number) => number;
    readonly demo_assignments: (a: number) => [number, number];
    readonly demo_cluster: (a: number, b: number, c: number) => [number, number];
    readonly demo_labels: (a: number) => [number, number];
    readonly demo_new: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
    readonly demo_points: (a: number) => [number, number];
    readonly demo_project: (a: number, b: number, c: number, d: number) => [number, number];
    readonly demo_prototypes: (a: number) => [number, number];
    readonly demo_sweep: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
