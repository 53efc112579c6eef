use serde::{Deserialize, Serialize};

use super::FitError;

/// Linear ratio and its value in dB (`20·log₁₀`). A zero ratio gives −∞ dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attenuation {
    pub ratio: f64,
    pub db: f64,
}

impl Attenuation {
    pub fn from_ratio(ratio: f64) -> Self {
        Self { ratio, db: ratio_to_db(ratio) }
    }

    pub fn is_unbounded(&self) -> bool {
        self.db.is_infinite()
    }
}

pub fn ratio_to_db(ratio: f64) -> f64 {
    20.0 * ratio.log10()
}

pub fn db_to_ratio(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

/// Line attenuation from the slope of the flip-flop Rabi frequency with drive
/// amplitude and the DC Stark slope of the hyperfine coupling (same units).
pub fn edsr_attenuation(rabi_slope: f64, stark_slope: f64) -> Result<Attenuation, FitError> {
    if stark_slope == 0.0 {
        return Err(FitError::ZeroDenominator("stark_slope"));
    }
    Ok(Attenuation::from_ratio(2.0 * rabi_slope / stark_slope))
}

/// Line attenuation from the broadening coefficient of a Coulomb peak under
/// the microwave drive and the one measured with a 100 Hz tone.
pub fn set_attenuation(k_mw: f64, k_100hz: f64) -> Result<Attenuation, FitError> {
    if k_100hz == 0.0 {
        return Err(FitError::ZeroDenominator("k_100hz"));
    }
    Ok(Attenuation::from_ratio(k_mw / k_100hz))
}

/// How a quoted drive voltage relates to the oscillation amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AmplitudeConvention {
    /// The quoted voltage is peak-to-peak; amplitude is half of it.
    #[default]
    PeakToPeak,
    /// The quoted voltage is the amplitude output by the source.
    SourceAmplitude,
}

impl AmplitudeConvention {
    pub fn amplitude(self, quoted: f64) -> f64 {
        match self {
            AmplitudeConvention::PeakToPeak => 0.5 * quoted,
            AmplitudeConvention::SourceAmplitude => quoted,
        }
    }
}

/// Rabi frequency per volt of oscillation amplitude.
pub fn rabi_slope(rabi_frequency: f64, quoted_voltage: f64, convention: AmplitudeConvention) -> Result<f64, FitError> {
    let amp = convention.amplitude(quoted_voltage);
    if amp == 0.0 {
        return Err(FitError::ZeroDenominator("drive voltage"));
    }
    Ok(rabi_frequency / amp)
}
