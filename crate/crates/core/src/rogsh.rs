//! Reduced order generalized spherical harmonics for cubic crystal symmetry.
//!
//! An orientation is reduced to three symmetrized GSH coefficients
//! `(2l+1) T(g)` with `l = 4, 4, 12`, each divided by a fixed normalizer so
//! that every channel lies in `[-1, 1]`.
//!
//! Orientation matrices use the passive Bunge convention
//! `g = Rz(phi2) Rx(Phi) Rz(phi1)`. Crystal symmetry operators act from the
//! left on this matrix (`g' = S g`), which is right-composition on the active
//! rotation `g^T`. All three basis functions are invariant under the 24
//! proper cubic rotations applied this way.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::field::{Dims, Field3, FieldError};

/// Degrees of the three retained harmonics.
pub const DEGREES: [u32; 3] = [4, 4, 12];

/// `max |(2l+1) T|` over SO(3) per channel.
///
/// Found by a 200^3 Euler-angle grid scan followed by local refinement around
/// the best cells; for all three channels the maximum sits at the identity
/// orientation (`Phi = 0`), where the closed forms reduce to
/// `9 sqrt(30)/12`, `9 sqrt(21)/6` and `25 * 2048 sqrt(166305594)/40304640`.
pub const NORMALIZERS: [f64; 3] = [
    4.107_919_181_288_746,
    6.873_863_542_433_76,
    16.382_053_634_248_866,
];

/// Grid resolution used to establish [`NORMALIZERS`].
pub const NORMALIZER_GRID: usize = 200;

/// Bunge intrinsic ZXZ Euler angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerZXZ {
    pub phi1: f64,
    #[serde(rename = "Phi")]
    pub big_phi: f64,
    pub phi2: f64,
}

impl EulerZXZ {
    pub fn new(phi1: f64, big_phi: f64, phi2: f64) -> Self {
        EulerZXZ {
            phi1,
            big_phi,
            phi2,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.phi1.is_finite() && self.big_phi.is_finite() && self.phi2.is_finite()
    }

    /// Canonical representative: `phi1, phi2 in [0, 2pi)`, `Phi in [0, pi]`.
    pub fn normalized(&self) -> Self {
        let mut phi1 = self.phi1;
        let mut big = self.big_phi.rem_euclid(TAU);
        let mut phi2 = self.phi2;
        if big > PI {
            // (phi1, Phi, phi2) ~ (phi1 + pi, 2pi - Phi, phi2 + pi)
            big = TAU - big;
            phi1 += PI;
            phi2 += PI;
        }
        EulerZXZ {
            phi1: phi1.rem_euclid(TAU),
            big_phi: big,
            phi2: phi2.rem_euclid(TAU),
        }
    }

    /// Passive orientation matrix `Rz(phi2) Rx(Phi) Rz(phi1)`, row-major.
    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let (s1, c1) = self.phi1.sin_cos();
        let (s, c) = self.big_phi.sin_cos();
        let (s2, c2) = self.phi2.sin_cos();
        [
            [c1 * c2 - s1 * s2 * c, s1 * c2 + c1 * s2 * c, s2 * s],
            [-c1 * s2 - s1 * c2 * c, -s1 * s2 + c1 * c2 * c, c2 * s],
            [s1 * s, -c1 * s, c],
        ]
    }

    /// Inverse of [`EulerZXZ::to_matrix`] for a proper rotation matrix.
    pub fn from_matrix(g: &[[f64; 3]; 3]) -> Self {
        let big = g[2][2].clamp(-1.0, 1.0).acos();
        let (phi1, phi2) = if big.sin().abs() > 1e-9 {
            (g[2][0].atan2(-g[2][1]), g[0][2].atan2(g[1][2]))
        } else {
            // gimbal lock: only phi1 +- phi2 is determined, put it all in phi1
            (g[0][1].atan2(g[0][0]), 0.0)
        };
        EulerZXZ {
            phi1: phi1.rem_euclid(TAU),
            big_phi: big,
            phi2: phi2.rem_euclid(TAU),
        }
    }
}

/// Normalized ROGSH coefficients, one per channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RogshVector(pub [f64; 3]);

/// Unnormalized basis values `[Re T4^{-4,1}, T4^{0,1}, T12^{0,2}]` at `g`.
pub fn eval_basis(g: EulerZXZ) -> [f64; 3] {
    let c = g.big_phi.cos();
    let s = g.big_phi.sin();
    let (p1, p2) = (g.phi1, g.phi2);
    let cm = c - 1.0;
    let cp = c + 1.0;
    let cm2 = cm * cm;
    let cp2 = cp * cp;

    let t4_41 = 30f64.sqrt() / 192.0
        * ((14.0 * cm2 * (4.0 * p1).cos() + cp2 * (4.0 * p1 + 4.0 * p2).cos()) * cp2
            + cm2 * cm2 * (4.0 * p1 - 4.0 * p2).cos());

    let s2 = s * s;
    let s4 = s2 * s2;
    let c2 = c * c;
    let c4 = c2 * c2;
    let t4_01 = 21f64.sqrt() / 48.0 * (5.0 * s4 * (4.0 * p2).cos() + 35.0 * c4 - 30.0 * c2 + 3.0);

    let c6 = c4 * c2;
    let c8 = c4 * c4;
    let c10 = c8 * c2;
    let c12 = c6 * c6;
    let sc2 = cm2 * cp2; // (c-1)^2 (c+1)^2
    let sc4 = sc2 * sc2;
    let sc6 = sc4 * sc2;
    let t12_02 = 166_305_594f64.sqrt() / 40_304_640.0
        * (1025.0 * sc6 * (12.0 * p2).cos()
            + 66.0 * sc4 * (161.0 * s4 - 280.0 * s2 + 120.0) * (8.0 * p2).cos()
            + 99.0
                * sc2
                * (7429.0 * c8 - 9044.0 * c6 + 3230.0 * c4 - 340.0 * c2 + 5.0)
                * (4.0 * p2).cos()
            + 1_352_078.0 * c12
            - 3_879_876.0 * c10
            + 4_157_010.0 * c8
            - 2_042_040.0 * c6
            + 450_450.0 * c4
            - 36_036.0 * c2
            + 462.0);

    [t4_41, t4_01, t12_02]
}

/// Raw Dirac-measure coefficients `(2l+1) T(g)` before normalization.
pub fn raw_coeffs(g: EulerZXZ) -> [f64; 3] {
    let b = eval_basis(g);
    [
        (2 * DEGREES[0] + 1) as f64 * b[0],
        (2 * DEGREES[1] + 1) as f64 * b[1],
        (2 * DEGREES[2] + 1) as f64 * b[2],
    ]
}

pub fn euler_to_coeffs(g: EulerZXZ) -> RogshVector {
    let raw = raw_coeffs(g);
    RogshVector([
        raw[0] / NORMALIZERS[0],
        raw[1] / NORMALIZERS[1],
        raw[2] / NORMALIZERS[2],
    ])
}

/// Converts a grid of orientations (x fastest) to a 3-channel field.
pub fn field_euler_to_rogsh(dims: Dims, orientations: &[EulerZXZ]) -> Result<Field3, FieldError> {
    dims.validate()?;
    let s = dims.checked_voxels(1)?;
    if orientations.len() != s {
        return Err(FieldError::Length {
            expected: s,
            got: orientations.len(),
        });
    }
    let mut field = Field3::zeros(dims, 3)?;
    for (i, g) in orientations.iter().enumerate() {
        let v = euler_to_coeffs(*g).0;
        for (c, val) in v.iter().enumerate() {
            field.data_mut()[c * s + i] = *val;
        }
    }
    Ok(field)
}

/// The 24 proper rotations of the cube as signed permutation matrices.
pub fn cubic_rotations() -> Vec<[[f64; 3]; 3]> {
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut out = Vec::with_capacity(24);
    for perm in PERMS {
        for signs in 0..8u32 {
            let mut m = [[0.0; 3]; 3];
            for (row, &col) in perm.iter().enumerate() {
                m[row][col] = if signs >> row & 1 == 1 { -1.0 } else { 1.0 };
            }
            if det3(&m) > 0.0 {
                out.push(m);
            }
        }
    }
    out
}

/// Applies the crystal symmetry `sym` to `g` (see module docs for the side).
pub fn apply_crystal_symmetry(sym: &[[f64; 3]; 3], g: EulerZXZ) -> EulerZXZ {
    EulerZXZ::from_matrix(&matmul3(sym, &g.to_matrix()))
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_orientation(rng: &mut impl Rng) -> EulerZXZ {
        EulerZXZ::new(
            rng.random_range(0.0..TAU),
            rng.random_range(-1.0f64..1.0).acos(),
            rng.random_range(0.0..TAU),
        )
    }

    #[test]
    fn identity_values_match_closed_forms() {
        let b = eval_basis(EulerZXZ::new(0.0, 0.0, 0.0));
        assert!((b[1] - 21f64.sqrt() / 6.0).abs() < 1e-14);
        // trailing T12 polynomial coefficients summed at cos = 1
        let tail: i64 = 1_352_078 - 3_879_876 + 4_157_010 - 2_042_040 + 450_450 - 36_036 + 462;
        assert_eq!(tail, 2048);
        let want = 166_305_594f64.sqrt() / 40_304_640.0 * tail as f64;
        assert!((b[2] - want).abs() < 1e-13);
        assert!((b[0] - 30f64.sqrt() / 12.0).abs() < 1e-14);
    }

    #[test]
    fn coeffs_compose_scaling_and_normalizers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let g = random_orientation(&mut rng);
            let b = eval_basis(g);
            let v = euler_to_coeffs(g).0;
            assert!((v[0] - 9.0 * b[0] / NORMALIZERS[0]).abs() < 1e-15);
            assert!((v[1] - 9.0 * b[1] / NORMALIZERS[1]).abs() < 1e-15);
            assert!((v[2] - 25.0 * b[2] / NORMALIZERS[2]).abs() < 1e-15);
        }
        let id = euler_to_coeffs(EulerZXZ::new(0.0, 0.0, 0.0)).0;
        assert!((id[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn normalizer_constants_match_identity_closed_forms() {
        assert!((NORMALIZERS[0] - 9.0 * 30f64.sqrt() / 12.0).abs() < 1e-12);
        assert!((NORMALIZERS[1] - 9.0 * 21f64.sqrt() / 6.0).abs() < 1e-12);
        let t12 = 166_305_594f64.sqrt() / 40_304_640.0 * 2048.0;
        assert!((NORMALIZERS[2] - 25.0 * t12).abs() < 1e-12);
    }

    #[test]
    fn periodic_in_phi1_and_phi2() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let g = random_orientation(&mut rng);
            let a = eval_basis(g);
            let b = eval_basis(EulerZXZ::new(g.phi1 + TAU, g.big_phi, g.phi2));
            let c = eval_basis(EulerZXZ::new(g.phi1, g.big_phi, g.phi2 - TAU));
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
                assert!((a[k] - c[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matrix_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let g = random_orientation(&mut rng);
            let back = EulerZXZ::from_matrix(&g.to_matrix());
            let (m1, m2) = (g.to_matrix(), back.to_matrix());
            for i in 0..3 {
                for j in 0..3 {
                    assert!((m1[i][j] - m2[i][j]).abs() < 1e-10);
                }
            }
        }
        // gimbal cases still reproduce the matrix
        for g in [EulerZXZ::new(0.3, 0.0, 1.1), EulerZXZ::new(0.3, PI, 1.1)] {
            let m1 = g.to_matrix();
            let m2 = EulerZXZ::from_matrix(&m1).to_matrix();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((m1[i][j] - m2[i][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cubic_group_has_24_distinct_elements() {
        let g = cubic_rotations();
        assert_eq!(g.len(), 24);
        for (i, a) in g.iter().enumerate() {
            for b in &g[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn invariant_under_crystal_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let group = cubic_rotations();
        for _ in 0..100 {
            let g = random_orientation(&mut rng);
            let v = euler_to_coeffs(g).0;
            for s in &group {
                let w = euler_to_coeffs(apply_crystal_symmetry(s, g)).0;
                for k in 0..3 {
                    assert!((v[k] - w[k]).abs() < 1e-10, "channel {k}: {} vs {}", v[k], w[k]);
                }
            }
        }
    }

    #[test]
    fn normalization_handles_out_of_range_angles() {
        let g = EulerZXZ::new(-1.0, 4.0, 7.0).normalized();
        assert!((0.0..TAU).contains(&g.phi1));
        assert!((0.0..=PI).contains(&g.big_phi));
        let a = EulerZXZ::new(-1.0, 4.0, 7.0).to_matrix();
        let b = g.to_matrix();
        for i in 0..3 {
            for j in 0..3 {
                assert!((a[i][j] - b[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn field_conversion_is_pointwise() {
        let d = Dims::cube(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let gs: Vec<EulerZXZ> = (0..8).map(|_| random_orientation(&mut rng)).collect();
        let f = field_euler_to_rogsh(d, &gs).unwrap();
        for (i, g) in gs.iter().enumerate() {
            let (x, y, z) = d.coords(i);
            let v = euler_to_coeffs(*g).0;
            for c in 0..3 {
                assert_eq!(f.get(c, x, y, z), v[c]);
            }
        }
        let constant = vec![EulerZXZ::new(0.4, 0.5, 0.6); 8];
        let f = field_euler_to_rogsh(d, &constant).unwrap();
        let v = euler_to_coeffs(constant[0]).0;
        for c in 0..3 {
            assert!(f.channel(c).iter().all(|&x| x == v[c]));
        }
        assert!(field_euler_to_rogsh(Dims { nx: 0, ny: 2, nz: 2 }, &[]).is_err());
        assert!(field_euler_to_rogsh(d, &gs[..3]).is_err());
    }
}
