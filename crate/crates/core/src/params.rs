//! Sweep parameters in the form users type them: comma lists and `K,SIGMA`
//! pairs, shared by the command line and the HTTP API.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::occlusion::{OcclusionError, PatchFill, PatchShape, PatchSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepParams {
    pub patch_sizes: Vec<usize>,
    pub stride: usize,
    pub fill: PatchFill,
    pub shape: PatchShape,
    /// `"K,SIGMA"`, e.g. `"5,1.5"`.
    pub edge_blur: Option<String>,
    pub seed: u64,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            patch_sizes: PatchSpec::DEFAULT_SIZES.to_vec(),
            stride: PatchSpec::DEFAULT_STRIDE,
            fill: PatchFill::Black,
            shape: PatchShape::Rectangular,
            edge_blur: None,
            seed: 0,
        }
    }
}

impl SweepParams {
    /// One validated spec per patch size.
    pub fn to_specs(&self) -> Result<Vec<PatchSpec>, OcclusionError> {
        if self.patch_sizes.is_empty() {
            return Err(OcclusionError::InvalidParameter("at least one patch size is required".into()));
        }
        let blur = self.edge_blur.as_deref().map(parse_edge_blur).transpose()?;
        self.patch_sizes
            .iter()
            .map(|&size| {
                let mut spec = PatchSpec::new(size, self.stride)
                    .with_fill(self.fill)
                    .with_shape(self.shape)
                    .with_noise_seed(self.seed);
                if let Some((kernel, sigma)) = blur {
                    spec = spec.with_edge_blur(kernel, sigma);
                }
                spec.validate()?;
                Ok(spec)
            })
            .collect()
    }
}

/// Parses `"a,b,c"` into values, rejecting empty items.
pub fn parse_list<T: FromStr>(text: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(|item| {
            let item = item.trim();
            if item.is_empty() {
                return Err(format!("empty item in {text:?}"));
            }
            item.parse::<T>().map_err(|e| format!("{item:?}: {e}"))
        })
        .collect()
}

/// Parses `"K,SIGMA"`.
pub fn parse_edge_blur(text: &str) -> Result<(usize, f64), OcclusionError> {
    let bad = || OcclusionError::InvalidParameter(format!("edge blur {text:?} is not K,SIGMA"));
    let (k, sigma) = text.split_once(',').ok_or_else(bad)?;
    let k: usize = k.trim().parse().map_err(|_| bad())?;
    let sigma: f64 = sigma.trim().parse().map_err(|_| bad())?;
    if k == 0 || !(sigma > 0.0 && sigma.is_finite()) {
        return Err(bad());
    }
    Ok((k, sigma))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_standard_sweep() {
        assert_eq!(SweepParams::default().to_specs().unwrap(), PatchSpec::default_sweep());
    }

    #[test]
    fn lists_and_blur() {
        assert_eq!(parse_list::<usize>("7, 14,28").unwrap(), vec![7, 14, 28]);
        assert!(parse_list::<usize>("7,,28").is_err());
        assert!(parse_list::<usize>("7,x").is_err());
        assert_eq!(parse_edge_blur("5,1.5").unwrap(), (5, 1.5));
        for bad in ["5", "0,1", "5,0", "5,-1", "a,1", "5,nan"] {
            assert!(parse_edge_blur(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn specs_carry_every_option() {
        let params = SweepParams {
            patch_sizes: vec![14],
            stride: 3,
            fill: PatchFill::Noise,
            shape: PatchShape::Round,
            edge_blur: Some("5,2".into()),
            seed: 9,
        };
        let spec = &params.to_specs().unwrap()[0];
        assert_eq!(
            spec,
            &PatchSpec::new(14, 3)
                .with_fill(PatchFill::Noise)
                .with_shape(PatchShape::Round)
                .with_edge_blur(5, 2.0)
                .with_noise_seed(9)
        );
        let bad = SweepParams {
            patch_sizes: vec![200],
            ..SweepParams::default()
        };
        assert!(bad.to_specs().is_err());
        assert!(SweepParams {
            patch_sizes: vec![],
            ..SweepParams::default()
        }
        .to_specs()
        .is_err());
    }

    #[test]
    fn json_document() {
        let p: SweepParams = serde_json::from_str(r#"{"patch_sizes":[7],"fill":"gray","shape":"round"}"#).unwrap();
        assert_eq!(p.patch_sizes, vec![7]);
        assert_eq!(p.fill, PatchFill::Gray);
        assert_eq!(p.stride, 5);
        assert!(serde_json::from_str::<SweepParams>(r#"{"patch_size":[7]}"#).is_err());
    }
}
