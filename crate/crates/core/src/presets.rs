//! Cell configurations shipped with the crate.

use crate::cellgeom::{load_config, CellConfig, ConfigError};

const PRESETS: &[(&str, &str)] = &[
    ("grid2x2", include_str!("../configs/grid2x2.json")),
    ("grid4x4", include_str!("../configs/grid4x4.json")),
    ("outdoor104", include_str!("../configs/outdoor104.json")),
    ("indoor30", include_str!("../configs/indoor30.json")),
    ("cityscapes256", include_str!("../configs/cityscapes256.json")),
];

/// Names of the built-in configurations.
pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

/// Raw document bytes of a built-in configuration.
pub fn preset_document(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, d)| *d)
}

/// Loads a built-in configuration by name.
pub fn preset(name: &str) -> Option<Result<CellConfig, ConfigError>> {
    preset_document(name).map(|d| load_config(d.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cellgeom::{mirror_config, save_config, validate_config};

    #[test]
    fn presets_are_valid_canonical_and_mirror_symmetric() {
        for name in preset_names() {
            let doc = preset_document(name).unwrap();
            let cfg = preset(name).unwrap().unwrap();
            assert_eq!(cfg.name(), name);
            assert!(validate_config(&cfg).is_empty(), "{name}: {:?}", validate_config(&cfg));
            assert_eq!(save_config(&cfg), doc.as_bytes(), "{name} is not canonical");
            assert!(mirror_config(&cfg).1.is_some(), "{name} has no mirror permutation");
        }
    }

    #[test]
    fn output_widths() {
        let c = |n: &str| preset(n).unwrap().unwrap();
        assert_eq!((c("outdoor104").n_cells(), c("outdoor104").n_outputs()), (104, 1248));
        assert_eq!((c("indoor30").n_cells(), c("indoor30").n_outputs()), (30, 210));
        assert_eq!((c("cityscapes256").n_cells(), c("cityscapes256").n_outputs()), (256, 1024));
    }
}
