pub mod autodiff;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod study;
pub mod style;
pub mod tensor;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use autodiff::{Graph, Var};
pub use io::Config;
pub use tensor::{Element, Tensor};
pub use volume::{Mask, Volume};
