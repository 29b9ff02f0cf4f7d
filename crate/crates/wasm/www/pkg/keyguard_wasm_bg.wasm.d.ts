/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_keycurve_free: (a: number, b: number) => void;
export const flop_table: (a: number, b: number, c: number) => [number, number, number, number];
export const guard_gamma: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const key_curve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const keycurve_onset: (a: number) => number;
export const keycurve_spec: (a: number) => [number, number];
export const keycurve_threshold: (a: number) => number;
export const keycurve_xs: (a: number) => [number, number];
export const keycurve_ys: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
