/* tslint:disable */
/* eslint-disable */

export class TreeDemo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Grow a REBASE tree of `depth` steps with `width` continuations per step.
     */
    constructor(seed: number, width: number, depth: number);
    /**
     * ETS pruning decision for the final frontier.
     */
    prune(lambda_b: number, lambda_d: number): string;
    tree(): string;
}

/**
 * Simulated step embeddings clustered at `threshold`.
 */
export function cluster_steps(seed: number, count: number, noise: number, threshold: number): string;

/**
 * REBASE weights for `rewards` (a JS `Float64Array`).
 */
export function rebase_allocation(rewards: Float64Array, budget: number, temperature: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_treedemo_free: (a: number, b: number) => void;
    readonly cluster_steps: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly rebase_allocation: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly treedemo_new: (a: number, b: number, c: number) => [number, number, number];
    readonly treedemo_prune: (a: number, b: number, c: number) => [number, number, number, number];
    readonly treedemo_tree: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
