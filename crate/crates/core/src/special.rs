//! Error function family.
//!
//! `erf`/`erfc` follow the FreeBSD msun `s_erf.c` rational approximations
//! (sub-ulp accuracy in double precision). The inverses start from Giles'
//! single-precision polynomial and polish with Newton steps on the forward
//! function.

#![allow(clippy::excessive_precision)]

/* Coefficients from FreeBSD /usr/src/lib/msun/src/s_erf.c:
 * ====================================================
 * Copyright (C) 1993 by Sun Microsystems, Inc. All rights reserved.
 *
 * Developed at SunPro, a Sun Microsystems, Inc. business.
 * Permission to use, copy, modify, and distribute this
 * software is freely granted, provided that this notice
 * is preserved.
 * ====================================================
 */
const ERX: f64 = 8.45062911510467529297e-01;
const EFX8: f64 = 1.02703333676410069053e+00;
const PP: [f64; 5] = [
    1.28379167095512558561e-01,
    -3.25042107247001499370e-01,
    -2.84817495755985104766e-02,
    -5.77027029648944159157e-03,
    -2.37630166566501626084e-05,
];
const QQ: [f64; 5] = [
    3.97917223959155352819e-01,
    6.50222499887672944485e-02,
    5.08130628187576562776e-03,
    1.32494738004321644526e-04,
    -3.96022827877536812320e-06,
];
const PA: [f64; 7] = [
    -2.36211856075265944077e-03,
    4.14856118683748331666e-01,
    -3.72207876035701323847e-01,
    3.18346619901161753674e-01,
    -1.10894694282396677476e-01,
    3.54783043256182359371e-02,
    -2.16637559486879084300e-03,
];
const QA: [f64; 6] = [
    1.06420880400844228286e-01,
    5.40397917702171048937e-01,
    7.18286544141962662868e-02,
    1.26171219808761642112e-01,
    1.36370839120290507362e-02,
    1.19844998467991074170e-02,
];
const RA: [f64; 8] = [
    -9.86494403484714822705e-03,
    -6.93858572707181764372e-01,
    -1.05586262253232909814e+01,
    -6.23753324503260060396e+01,
    -1.62396669462573470355e+02,
    -1.84605092906711035994e+02,
    -8.12874355063065934246e+01,
    -9.81432934416914548592e+00,
];
const SA: [f64; 8] = [
    1.96512716674392571292e+01,
    1.37657754143519042600e+02,
    4.34565877475229228821e+02,
    6.45387271733267880336e+02,
    4.29008140027567833386e+02,
    1.08635005541779435134e+02,
    6.57024977031928170135e+00,
    -6.04244152148580987438e-02,
];
const RB: [f64; 7] = [
    -9.86494292470009928597e-03,
    -7.99283237680523006574e-01,
    -1.77579549177547519889e+01,
    -1.60636384855821916062e+02,
    -6.37566443368389627722e+02,
    -1.02509513161107724954e+03,
    -4.83519191608651397019e+02,
];
const SB: [f64; 7] = [
    3.03380607434824582924e+01,
    3.25792512996573918826e+02,
    1.53672958608443695994e+03,
    3.19985821950859553908e+03,
    2.55305040643316442583e+03,
    4.74528541206955367215e+02,
    -2.24409524465858183362e+01,
];

/// Horner evaluation, coefficients lowest degree first.
fn poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// `1 + x·poly(coeffs, x)`, the denominator shape used throughout `s_erf.c`.
fn poly1(coeffs: &[f64], x: f64) -> f64 {
    1.0 + x * poly(coeffs, x)
}

/// erf(|x|) − ERX correction on [0.84375, 1.25).
fn erf_mid(ax: f64) -> f64 {
    let s = ax - 1.0;
    poly(&PA, s) / poly1(&QA, s)
}

/// erfc(|x|) for |x| in [1.25, 28).
fn erfc_tail(ax: f64) -> f64 {
    let s = 1.0 / (ax * ax);
    let (r, big_s) = if ax < 1.0 / 0.35 {
        (poly(&RA, s), poly1(&SA, s))
    } else {
        (poly(&RB, s), poly1(&SB, s))
    };
    // Split -x² so the large part is exact: z has its low 32 bits cleared.
    let z = f64::from_bits(ax.to_bits() & 0xffff_ffff_0000_0000);
    (-z * z - 0.5625).exp() * ((z - ax) * (z + ax) + r / big_s).exp() / ax
}

pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    let ax = x.abs();
    let y = if ax < 0.84375 {
        if ax < f64::powi(2.0, -28) {
            return 0.125 * (8.0 * x + EFX8 * x);
        }
        let z = x * x;
        return x + x * (poly(&PP, z) / poly1(&QQ, z));
    } else if ax < 1.25 {
        ERX + erf_mid(ax)
    } else if ax < 6.0 {
        1.0 - erfc_tail(ax)
    } else {
        1.0
    };
    y.copysign(x)
}

pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    let ax = x.abs();
    if ax < 0.84375 {
        let z = x * x;
        let y = poly(&PP, z) / poly1(&QQ, z);
        return if x < 0.25 {
            1.0 - (x + x * y)
        } else {
            0.5 - (x - 0.5 + x * y)
        };
    }
    let tail = if ax < 1.25 {
        1.0 - ERX - erf_mid(ax)
    } else if ax < 28.0 {
        erfc_tail(ax)
    } else {
        0.0
    };
    if x > 0.0 {
        tail
    } else {
        2.0 - tail
    }
}

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// Giles' single-precision starting point for erf⁻¹, from `w = -ln((1-y)(1+y))`.
fn giles_start(w: f64, sign: f64) -> f64 {
    let p = if w < 5.0 {
        let w = w - 2.5;
        [
            2.81022636e-08,
            3.43273939e-07,
            -3.5233877e-06,
            -4.39150654e-06,
            0.00021858087,
            -0.00125372503,
            -0.00417768164,
            0.246640727,
            1.50140941,
        ]
        .iter()
        .fold(0.0, |p, &c| p * w + c)
    } else {
        let w = w.sqrt() - 3.0;
        [
            -0.000200214257,
            0.000100950558,
            0.00134934322,
            -0.00367342844,
            0.00573950773,
            -0.0076224613,
            0.00943887047,
            1.00167406,
            2.83297682,
        ]
        .iter()
        .fold(0.0, |p, &c| p * w + c)
    };
    p * sign
}

/// Inverse error function on (-1, 1); ±∞ at ±1, NaN outside.
pub fn erf_inv(y: f64) -> f64 {
    if y.is_nan() || y.abs() > 1.0 {
        return f64::NAN;
    }
    if y == 1.0 {
        return f64::INFINITY;
    }
    if y == -1.0 {
        return f64::NEG_INFINITY;
    }
    if y == 0.0 {
        return 0.0;
    }
    // Far tails are better conditioned through erfc.
    if y.abs() > 0.9 {
        let ey = 1.0 - y.abs();
        return erfc_inv(ey).copysign(y);
    }
    let w = -((1.0 - y) * (1.0 + y)).ln();
    let mut x = giles_start(w, y);
    for _ in 0..3 {
        let err = erf(x) - y;
        x -= err / (FRAC_2_SQRT_PI * (-x * x).exp());
    }
    x
}

/// Inverse complementary error function on (0, 2).
pub fn erfc_inv(e: f64) -> f64 {
    if e.is_nan() || !(0.0..=2.0).contains(&e) {
        return f64::NAN;
    }
    if e == 0.0 {
        return f64::INFINITY;
    }
    if e == 2.0 {
        return f64::NEG_INFINITY;
    }
    if e > 0.1 && e < 1.9 {
        return erf_inv(1.0 - e);
    }
    // (1-y)(1+y) == e(2-e) with y = 1-e, without cancellation.
    let w = -(e * (2.0 - e)).ln();
    let mut x = giles_start(w, 1.0 - e);
    for _ in 0..4 {
        let err = erfc(x) - e;
        let slope = -FRAC_2_SQRT_PI * (-x * x).exp();
        if slope == 0.0 {
            break;
        }
        x -= err / slope;
    }
    x
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}
