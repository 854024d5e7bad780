pub mod features;
pub mod gmod;
pub mod grafr;
pub mod hdlc;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod selector;
pub mod smod;
pub mod synth;
pub mod tensor;
