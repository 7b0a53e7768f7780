/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const attentionWeights: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const boostPreview: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const demo_catalog: (a: number) => [number, number];
export const demo_n_users: (a: number) => number;
export const demo_new: (a: number, b: number) => [number, number, number];
export const demo_recent_names: (a: number, b: number) => [number, number];
export const demo_recommend: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const demo_summary: (a: number) => [number, number];
export const demo_user_name: (a: number, b: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
