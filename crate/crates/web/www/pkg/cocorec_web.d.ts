/* tslint:disable */
/* eslint-disable */

/**
 * A small synthetic world with a base model trained on one fold.
 */
export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Item names with their cluster and role, one per line.
     */
    catalog(): string;
    n_users(): number;
    constructor(seed: number, beta: number);
    /**
     * Item names in the user's recent set, comma-separated.
     */
    recent_names(user: number): string;
    /**
     * `rank,item,score,lambda` lines.
     */
    recommend(user: number, context: string, k: number, pi: number, epsilon: number): string;
    summary(): string;
    user_name(user: number): string;
}

export function attentionWeights(query: Float64Array, keys: Float64Array): Float64Array;

export function boostPreview(probs: Float64Array, seen: Uint32Array, epsilon: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly attentionWeights: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly boostPreview: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly demo_catalog: (a: number) => [number, number];
    readonly demo_n_users: (a: number) => number;
    readonly demo_new: (a: number, b: number) => [number, number, number];
    readonly demo_recent_names: (a: number, b: number) => [number, number];
    readonly demo_recommend: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly demo_summary: (a: number) => [number, number];
    readonly demo_user_name: (a: number, b: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
