//! The four convolution operators of the localization network: vanilla
//! 2-D convolution, modulated deformable convolution, cross central
//! difference convolution over the horizontal/vertical cross, and the
//! depth-stacked dual correlation that produces the similarity map.
//!
//! Each operator has a plain forward function over [`Tensor`]s, a backward
//! function returning input and weight gradients, and a recording method on
//! [`GradTape`](crate::tensor::GradTape).
//!
//! [`Tensor`]: crate::tensor::Tensor

pub mod ccdc;
pub mod conv2d;
pub mod corr;
pub mod deform;

pub use ccdc::{ccdc_hv, CcdcSpec, CROSS_TAPS};
pub use conv2d::{conv2d, kernel_offsets, Conv2dGeometry, ConvSpec};
pub use corr::{conv3d_dual, corr2d_depthwise, DualStack};
pub use deform::{deform_conv2d, DeformField};

/// Output indices `o` in `0..out_len` whose input position
/// `o * stride + shift` falls inside `0..in_len`.
pub(crate) fn valid_range(out_len: usize, in_len: usize, stride: usize, shift: isize) -> std::ops::Range<usize> {
    let s = stride as isize;
    // smallest o with o*s + shift >= 0
    let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
    // largest o with o*s + shift <= in_len - 1
    let hi_num = in_len as isize - 1 - shift;
    if hi_num < 0 {
        return 0..0;
    }
    let hi = (hi_num / s + 1).min(out_len as isize);
    let lo = lo.min(hi);
    lo as usize..hi as usize
}
