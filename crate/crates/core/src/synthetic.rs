//! Analytic materials written in MERL layout: a Lambertian lobe plus a GGX specular
//! lobe with Schlick Fresnel. Used as stand-ins for measured tables in tests and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::merl_io::{
    angles_to_directions, index_to_angles, sample_index, MerlBrdf, MERL_SCALES, N_PHI_D,
    N_THETA_D, N_THETA_H, SAMPLE_COUNT,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticMaterial {
    pub diffuse: [f64; 3],
    pub specular: [f64; 3],
    /// GGX roughness `alpha`.
    pub roughness: f64,
}

impl AnalyticMaterial {
    /// Reflectance for local-frame directions (normal `+z`).
    pub fn eval(&self, wi: [f64; 3], wo: [f64; 3]) -> [f64; 3] {
        let cos_i = wi[2].max(1e-4);
        let cos_o = wo[2].max(1e-4);
        let h = crate::merl_io::normalize([wi[0] + wo[0], wi[1] + wo[1], wi[2] + wo[2]]);
        let a2 = self.roughness * self.roughness;
        let nh2 = h[2] * h[2];
        let denom = nh2 * (a2 - 1.0) + 1.0;
        let d = a2 / (std::f64::consts::PI * denom * denom);
        let g1 = |c: f64| 2.0 * c / (c + (a2 + (1.0 - a2) * c * c).sqrt());
        let g = g1(cos_i) * g1(cos_o);
        let cos_d = (wi[0] * h[0] + wi[1] * h[1] + wi[2] * h[2]).clamp(0.0, 1.0);
        let schlick = (1.0 - cos_d).powi(5);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let f = self.specular[c] + (1.0 - self.specular[c]) * schlick;
            out[c] = self.diffuse[c] / std::f64::consts::PI + f * d * g / (4.0 * cos_i * cos_o);
        }
        out
    }

    /// Tabulates the material in stored MERL units (reflectance divided by the channel
    /// scale). Bins with a direction below the horizon hold `-1`.
    pub fn to_merl(&self, name: impl Into<String>) -> MerlBrdf {
        let mut samples = vec![0.0; SAMPLE_COUNT];
        for ih in 0..N_THETA_H {
            for id in 0..N_THETA_D {
                for ip in 0..N_PHI_D {
                    let a = index_to_angles(ih, id, ip).expect("in range");
                    let value = angles_to_directions(&a).map(|d| self.eval(d.incident, d.outgoing));
                    for c in 0..3 {
                        samples[sample_index(c, ih, id, ip)] = match value {
                            Some(v) => v[c] / MERL_SCALES[c],
                            None => -1.0,
                        };
                    }
                }
            }
        }
        MerlBrdf {
            name: name.into(),
            samples,
        }
    }
}

/// `n` random materials with varied colors and roughness, named `synthetic-000`, ...
pub fn material_family(n: usize, seed: u64) -> Vec<(String, AnalyticMaterial)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let diffuse = [0, 1, 2].map(|_| rng.random_range(0.02..0.8));
            let spec_level = rng.random_range(0.02..0.6);
            let tint: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(0.6..1.0));
            let specular = tint.map(|t| t * spec_level);
            let roughness = rng.random_range(0.08..0.5);
            (
                format!("synthetic-{i:03}"),
                AnalyticMaterial {
                    diffuse,
                    specular,
                    roughness,
                },
            )
        })
        .collect()
}

pub fn merl_family(n: usize, seed: u64) -> Vec<MerlBrdf> {
    material_family(n, seed)
        .into_iter()
        .map(|(name, m)| m.to_merl(name))
        .collect()
}
