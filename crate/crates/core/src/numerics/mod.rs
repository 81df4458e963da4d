//! Dense linear algebra, reverse-mode differentiation and gradient checking.

mod gradcheck;
mod matrix;
mod svd;
mod tape;

pub use gradcheck::{
    check_gradients, finite_difference_check, relative_error, Coordinate, GradCheckReport,
    RELATIVE_FLOOR,
};
pub use matrix::{cosine, dot, norm, squared_distance, Matrix};
pub use svd::svd_values;
pub use tape::{backward, gelu, log_softmax_rows, softmax_rows, GradientTape, Gradients, Segment, Var};
