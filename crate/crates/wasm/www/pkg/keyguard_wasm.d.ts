/* tslint:disable */
/* eslint-disable */

/**
 * A detector key sampled on `[lo, hi]`.
 */
export class KeyCurve {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Smallest non-negative firing activation, or NaN if none up to the
     * sampled range.
     */
    readonly onset: number;
    /**
     * Canonical rendering of the parsed key.
     */
    readonly spec: string;
    readonly threshold: number;
    readonly xs: Float64Array;
    /**
     * Polynomial values at `xs`.
     */
    readonly ys: Float64Array;
}

/**
 * Per-layer FLOP table for a named architecture as CSV.
 */
export function flop_table(model: string, degree: number): string;

/**
 * Guard scaling constants a key assigns to one instrumented block.
 */
export function guard_gamma(spec: string, block: number, channels: number): Float64Array;

/**
 * Samples `f_k(x)` at `n` points and finds where the detector starts firing.
 */
export function key_curve(spec: string, lo: number, hi: number, n: number): KeyCurve;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_keycurve_free: (a: number, b: number) => void;
    readonly flop_table: (a: number, b: number, c: number) => [number, number, number, number];
    readonly guard_gamma: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly key_curve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly keycurve_onset: (a: number) => number;
    readonly keycurve_spec: (a: number) => [number, number];
    readonly keycurve_threshold: (a: number) => number;
    readonly keycurve_xs: (a: number) => [number, number];
    readonly keycurve_ys: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
