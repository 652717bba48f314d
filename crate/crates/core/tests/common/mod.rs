#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use dermlens_core::gateway::mock::{load_script, MockBackend};
use dermlens_core::gateway::{BackendConfig, Gateway};
use dermlens_core::pipeline::{Pipeline, PipelineConfig};
use dermlens_core::{load_manifest, DatasetManifest, Variant};

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/derm12")
}

pub fn manifest() -> DatasetManifest {
    load_manifest(fixture_dir().join("manifest.json")).expect("fixture manifest loads")
}

/// Mock gateway over a fixture script, plus a handle for counting calls.
pub fn mock(script: &str, inject_delay_ms: Option<u64>) -> (Gateway, Arc<MockBackend>) {
    let mut config = BackendConfig::mock("mock-vlm");
    config.inject_delay_ms = inject_delay_ms;
    config.max_concurrent_requests = 8;
    let script = load_script(fixture_dir().join(script)).expect("fixture script loads");
    let backend = Arc::new(MockBackend::new("mock-vlm", script, inject_delay_ms));
    let gateway = Gateway::new(config, backend.clone()).expect("valid config");
    (gateway, backend)
}

pub fn pipeline(variant: Variant, script: &str, workers: usize) -> (Pipeline, Arc<MockBackend>) {
    let m = manifest();
    let mut config = PipelineConfig::new(variant, m.vocabulary.clone(), m.classes.clone());
    config.workers = workers;
    let (gateway, backend) = mock(script, None);
    (Pipeline::new(config, gateway), backend)
}
