pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod fpn;
pub mod geom;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod pointcloud;
pub mod seed;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use data::{AnnotatedImage, Instance, Rle};
pub use decode::{Anchor, Detection};
pub use error::{Error, Result};
pub use geom::{BBox, BinaryMask};
pub use metrics::{EvalReport, MatchCounts};
pub use model::{DaSNet, ModelOutput, Prediction};
pub use params::{ParamId, ParamKind, ParamStore};
pub use pointcloud::{ColoredPointCloud, Intrinsics};
pub use tensor::{ConvSpec, Float, Shape, Tensor};
