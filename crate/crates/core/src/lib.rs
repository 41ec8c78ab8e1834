pub mod classical;
pub mod commands;
pub mod composite;
pub mod hiermodel;
pub mod linalg;
pub mod numeric;
pub mod profiling;
pub mod registry;
pub mod sampler;
pub mod scalar;

/// Double-precision forms of the generic numeric types.
pub type FixedFit64 = classical::FixedFit<f64>;
pub type DesignMatrix64 = classical::DesignMatrix<f64>;
pub type ZReport64 = classical::ZReport<f64>;
pub type VariationIndices64 = classical::VariationIndices<f64>;
pub type HierParams64 = hiermodel::HierParams<f64>;

/// Quote a CSV field when it contains a delimiter, quote or newline.
pub(crate) fn csv_field(s: &str) -> std::borrow::Cow<'_, str> {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\"")).into()
    } else {
        s.into()
    }
}
