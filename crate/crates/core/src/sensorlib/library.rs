use super::{SensorSrf, SrfBand};
use crate::specdata::{default_wavelengths, DEFAULT_BANDS};

/// `(name, centres in nm, sigma in nm)`. Covers 1 to 12 bands, from a
/// panchromatic channel to a narrow-band imager on the native grid.
const SENSORS: &[(&str, &[f64], f64)] = &[
    ("pan-1", &[600.0], 60.0),
    ("nir-1", &[842.0], 18.0),
    ("green-red-2", &[560.0, 665.0], 14.0),
    ("edge-pair-2", &[705.0, 783.0], 10.0),
    ("rgb-3", &[470.0, 555.0, 660.0], 20.0),
    ("rededge-3", &[705.0, 740.0, 783.0], 8.0),
    ("rgbn-4", &[490.0, 560.0, 665.0, 842.0], 16.0),
    ("wide-4", &[500.0, 620.0, 740.0, 860.0], 30.0),
    ("landsat-5", &[482.0, 561.0, 655.0, 865.0, 940.0], 14.0),
    ("vnir-6", &[480.0, 550.0, 620.0, 690.0, 760.0, 830.0], 12.0),
    ("odd-7", &[470.0, 530.0, 610.0, 680.0, 750.0, 820.0, 900.0], 11.0),
    ("hyper-8", &[460.0, 528.0, 597.0, 665.0, 734.0, 802.0, 871.0, 940.0], 10.0),
    ("msi-9", &[490.0, 560.0, 665.0, 705.0, 740.0, 783.0, 842.0, 865.0, 945.0], 9.0),
    ("ms-10", &[455.0, 509.0, 563.0, 617.0, 671.0, 725.0, 779.0, 833.0, 887.0, 941.0], 8.0),
];

/// The built-in library of 15 synthetic Gaussian sensors.
pub fn builtin_library() -> Vec<SensorSrf> {
    let mut lib: Vec<SensorSrf> = SENSORS
        .iter()
        .map(|(name, centres, sigma)| SensorSrf {
            name: (*name).into(),
            bands: centres
                .iter()
                .map(|c| SrfBand::gaussian(*c, *sigma, 2.0))
                .collect(),
        })
        .collect();
    lib.push(SensorSrf {
        name: "narrow-12".into(),
        bands: default_wavelengths(DEFAULT_BANDS)
            .iter()
            .map(|c| SrfBand::gaussian(*c, 5.0, 1.0))
            .collect(),
    });
    lib
}
