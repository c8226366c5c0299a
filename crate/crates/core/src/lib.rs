pub mod autograd;
pub mod tensor;
pub mod nn;
pub mod error;
pub mod media_io;
pub mod scene_data;
pub mod gradcheck;
pub mod audio_encoder;
pub mod video_encoder;
pub mod fusion;
pub mod temporal;
pub mod decoder;
pub mod stoi;
pub mod metrics;
pub mod model;
pub mod checkpoint;
pub mod history;
pub mod trainer;
