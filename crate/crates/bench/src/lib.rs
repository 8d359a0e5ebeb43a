//! Fixtures shared by the benchmarks in `benches/`.

use bevfuse_core::model::FrameInput;
use bevfuse_core::synth::{generate_scene, Scene, SceneConfig};
use bevfuse_core::train::frame_input;
use bevfuse_core::{BevGridSpec, Model, ModelConfig, SensorRig};

/// One default scene, the default model and the inputs of its second frame.
pub struct Fixture {
    pub scene: Scene,
    pub rig: SensorRig,
    pub grid: BevGridSpec,
    pub model: Model,
    pub input: FrameInput,
}

impl Fixture {
    pub fn new() -> Self {
        let rig = SensorRig::default_rig();
        let grid = BevGridSpec::default();
        let scene = generate_scene(&SceneConfig { seed: 1, ..SceneConfig::default() }, &rig, 0);
        let model = Model::new(ModelConfig::default(), rig.clone(), 0).expect("default model");
        let input = frame_input(&scene.frames[1], Some(&scene.frames[0]), &rig, &grid).expect("valid frame");
        Self { scene, rig, grid, model, input }
    }
}

impl Default for Fixture {
    fn default() -> Self {
        Self::new()
    }
}
