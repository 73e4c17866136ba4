//! A coordinator and its workers in one process, for tests and demos.

use std::path::{Path, PathBuf};
use std::time::Duration;

use cvgrid_core::job::ResourceClass;

use crate::coordinator::{self, CoordinatorConfig, CoordinatorError, CoordinatorHandle};
use crate::worker::{register_worker, FunctionalityRegistry, WorkerConfig, WorkerError, WorkerHandle, WorkerProfile};

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error(transparent)]
    Coordinator(#[from] CoordinatorError),
    #[error(transparent)]
    Worker(#[from] WorkerError),
}

#[derive(Debug)]
pub struct LocalCluster {
    pub coordinator: CoordinatorHandle,
    pub workers: Vec<WorkerHandle>,
    storage_root: PathBuf,
    registry: FunctionalityRegistry,
    threads: usize,
}

impl LocalCluster {
    /// One gpu-labelled worker and two cpu workers.
    pub fn default_profiles() -> Vec<WorkerProfile> {
        vec![
            WorkerProfile::new("gpu-0", [ResourceClass::Gpu], 2).expect("valid"),
            WorkerProfile::new("cpu-0", [ResourceClass::Cpu], 1).expect("valid"),
            WorkerProfile::new("cpu-1", [ResourceClass::Cpu], 1).expect("valid"),
        ]
    }

    pub async fn start(
        storage_root: &Path,
        profiles: Vec<WorkerProfile>,
        registry: FunctionalityRegistry,
    ) -> Result<Self, ClusterError> {
        Self::start_with(CoordinatorConfig::ephemeral(storage_root), profiles, registry).await
    }

    pub async fn start_with(
        config: CoordinatorConfig,
        profiles: Vec<WorkerProfile>,
        registry: FunctionalityRegistry,
    ) -> Result<Self, ClusterError> {
        let storage_root = config.storage_root.clone();
        let coordinator = coordinator::start(config).await?;
        let mut cluster = LocalCluster {
            coordinator,
            workers: Vec::new(),
            storage_root,
            registry,
            threads: 2,
        };
        for p in profiles {
            cluster.add_worker(p).await?;
        }
        Ok(cluster)
    }

    pub async fn add_worker(&mut self, profile: WorkerProfile) -> Result<&WorkerHandle, ClusterError> {
        let mut config = WorkerConfig::new(
            profile,
            self.coordinator.broker_addr,
            self.coordinator.relay_addr,
            &self.storage_root,
        );
        config.threads = self.threads;
        config.connect_attempts = 3;
        let handle = register_worker(config, self.registry.clone()).await?;
        self.workers.push(handle);
        Ok(self.workers.last().expect("just pushed"))
    }

    pub fn kill_worker(&self, index: usize) {
        self.workers[index].kill();
    }

    pub fn base_url(&self) -> String {
        self.coordinator.base_url()
    }

    pub fn storage_root(&self) -> &Path {
        &self.storage_root
    }

    /// Polls until `f` holds or `timeout` passes.
    pub async fn wait_until(&self, timeout: Duration, mut f: impl FnMut(&Self) -> bool) -> bool {
        let deadline = tokio::time::Instant::now() + timeout;
        while tokio::time::Instant::now() < deadline {
            if f(self) {
                return true;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        f(self)
    }
}
