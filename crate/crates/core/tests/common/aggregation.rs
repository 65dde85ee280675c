//! Hand-evaluated aggregation cases shared by the metric tests and the
//! acceptance suite. Sub-score order: `[nc, dac, ddc, tlc, ep, ttc, lk, hc, ec, c]`.

#![allow(dead_code)]

pub fn pdms_oracle(s: &[f64; 10]) -> f64 {
    let [nc, dac, _, _, ep, ttc, _, _, _, c] = *s;
    nc * dac * (5.0 * ttc + 2.0 * c + 5.0 * ep) / 12.0
}

pub fn epdms_oracle(a: &[f64; 10], h: &[f64; 10]) -> f64 {
    let f = |i: usize| if h[i] == 0.0 { 1.0 } else { a[i] };
    let gates = f(0) * f(1) * f(2) * f(3);
    // ttc, ep, hc, lk, ec with weights 5, 5, 2, 2, 2
    gates * (5.0 * f(5) + 5.0 * f(4) + 2.0 * f(7) + 2.0 * f(6) + 2.0 * f(8)) / 16.0
}

/// `(agent, human, pdms, epdms)` evaluated by hand.
pub fn cases() -> Vec<([f64; 10], [f64; 10], f64, f64)> {
    let one = [1.0; 10];
    vec![
        (one, one, 1.0, 1.0),
        ([0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0], one, 0.0, 0.0),
        ([1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0], one, 0.0, 0.0),
        ([1.0, 1.0, 1.0, 1.0, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0], one, 9.5 / 12.0, 13.5 / 16.0),
        ([1.0, 1.0, 1.0, 1.0, 0.8, 1.0, 1.0, 1.0, 0.5, 1.0], one, 11.0 / 12.0, 0.875),
        ([1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0], one, 7.0 / 12.0, 11.0 / 16.0),
        ([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0], one, 10.0 / 12.0, 1.0),
        ([1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0], one, 0.0, 6.0 / 16.0),
        ([1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0], one, 1.0, 0.0),
        ([1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0], one, 1.0, 0.0),
        // agent fails DAC where the human also fails: not blamed
        (
            [1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            [1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            0.0,
            1.0,
        ),
        (
            [0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            [0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            0.0,
            1.0,
        ),
        (
            [1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            [1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            1.0,
            1.0,
        ),
        // human zero on soft metrics lifts the agent's values to 1
        (
            [1.0, 1.0, 1.0, 1.0, 0.2, 0.0, 0.0, 1.0, 1.0, 1.0],
            [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0],
            3.0 / 12.0,
            1.0,
        ),
        (
            [1.0, 1.0, 1.0, 1.0, 0.25, 1.0, 0.0, 0.0, 0.0, 1.0],
            [1.0, 1.0, 1.0, 1.0, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0],
            8.25 / 12.0,
            6.25 / 16.0,
        ),
        (
            [1.0, 1.0, 1.0, 1.0, 0.25, 1.0, 0.0, 0.0, 0.0, 1.0],
            [1.0, 1.0, 1.0, 1.0, 0.5, 1.0, 0.0, 0.0, 0.0, 1.0],
            8.25 / 12.0,
            12.25 / 16.0,
        ),
        ([1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0], one, 7.0 / 12.0, 11.0 / 16.0),
        ([1.0, 1.0, 1.0, 1.0, 0.6, 0.0, 1.0, 0.0, 1.0, 0.0], one, 3.0 / 12.0, 7.0 / 16.0),
        ([1.0, 1.0, 1.0, 1.0, 0.9, 1.0, 0.0, 1.0, 0.0, 1.0], one, 11.5 / 12.0, 11.5 / 16.0),
        ([1.0, 1.0, 1.0, 1.0, 0.1, 0.0, 1.0, 1.0, 1.0, 1.0], one, 2.5 / 12.0, 6.5 / 16.0),
        ([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0], one, 1.0, 14.0 / 16.0),
        ([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0], one, 1.0, 14.0 / 16.0),
        ([0.0; 10], one, 0.0, 0.0),
        ([0.0; 10], [0.0; 10], 0.0, 1.0),
        (
            [1.0, 1.0, 1.0, 1.0, 0.3, 1.0, 1.0, 1.0, 1.0, 0.0],
            [1.0, 1.0, 1.0, 1.0, 0.7, 1.0, 1.0, 1.0, 1.0, 0.0],
            6.5 / 12.0,
            12.5 / 16.0,
        ),
    ]
}
