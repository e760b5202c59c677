//! Non-attention layers: convolutions, pooling, dense and GDN/IGDN.

mod conv;
mod dense;
mod gdn;
mod norm;
mod pool;

pub use conv::{conv1d, conv1d_transpose, Conv1d, Conv2d, ConvTranspose1d, ConvTranspose2d};
pub use dense::Dense;
pub use gdn::{
    gdn, gdn_invert_exact, gdn_invert_exact_counted, igdn, Gdn, BETA_MIN, GDN_ALPHA, GDN_EPSILON,
};
pub use norm::{BatchNorm, BN_EPSILON, BN_MOMENTUM};
pub use pool::{maxpool1d, upsample1d};
