//! Embodied object discovery in synthetic point-cloud scenes.
//!
//! A cylindrical "container" agent moves over a scene, crops points and asks
//! an analytic shape prior whether the crop is a complete object. Accepted
//! crops become pseudo instance masks that are deduplicated and scored with
//! class-agnostic AP/RC/PR metrics. The agent is trained with PPO.

pub mod env;
pub mod eval;
pub mod geom;
pub mod labelstore;
pub mod policy;
pub mod ppo;
pub mod prior;
pub mod sceneforge;
pub mod seeding;
