//! Signal preprocessing: IIR filter design, polyphase resampling and the
//! per-record chain built from them.

pub mod filter;
pub mod preprocess;
pub mod resample;

pub use filter::{
    apply_filter, design_butterworth_highpass, design_butterworth_lowpass, design_notch, FilterDesign,
    FilterKind, IirFilter,
};
pub use preprocess::{fix_length, normalize, preprocess_dataset, preprocess_record, PreprocessConfig};
pub use resample::{resample, Resampler};
