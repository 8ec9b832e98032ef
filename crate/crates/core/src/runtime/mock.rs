//! In-process container runtime. Containers are stub model servers bound to
//! loopback; every create payload is captured for inspection.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::Mutex;

use super::engine::{ContainerRuntime, ContainerStats, CreateRequest, EngineError, ImageSpec};
use super::stub::{StubConfig, StubServer};

struct MockContainer {
    name: String,
    request: CreateRequest,
    server: Option<StubServer>,
}

struct State {
    available: bool,
    images: BTreeSet<String>,
    containers: BTreeMap<String, MockContainer>,
    create_log: Vec<CreateRequest>,
    next_id: u64,
    scripted_stats: HashMap<String, VecDeque<Option<ContainerStats>>>,
    default_stats: ContainerStats,
    fail_builds: bool,
}

#[derive(Clone)]
pub struct MockRuntime {
    state: Arc<Mutex<State>>,
}

impl Default for MockRuntime {
    fn default() -> Self {
        Self::new()
    }
}

impl MockRuntime {
    pub fn new() -> Self {
        Self {
            state: Arc::new(Mutex::new(State {
                available: true,
                images: BTreeSet::new(),
                containers: BTreeMap::new(),
                create_log: Vec::new(),
                next_id: 0,
                scripted_stats: HashMap::new(),
                default_stats: ContainerStats {
                    gpu_util_pct: None,
                    mem_bytes: 64 * 1024 * 1024,
                },
                fail_builds: false,
            })),
        }
    }

    /// Simulates the engine going away (or coming back).
    pub fn set_available(&self, available: bool) {
        self.state.lock().available = available;
    }

    pub fn set_fail_builds(&self, fail: bool) {
        self.state.lock().fail_builds = fail;
    }

    /// Every create payload received, in order.
    pub fn create_requests(&self) -> Vec<CreateRequest> {
        self.state.lock().create_log.clone()
    }

    pub fn container_count(&self) -> usize {
        self.state.lock().containers.len()
    }

    pub fn images(&self) -> Vec<String> {
        self.state.lock().images.iter().cloned().collect()
    }

    pub fn container_name(&self, id: &str) -> Option<String> {
        self.state.lock().containers.get(id).map(|c| c.name.clone())
    }

    /// Queues stats answers for a container; `None` entries make the stats
    /// call fail as if the source were unreachable.
    pub fn script_stats(&self, id: &str, trace: impl IntoIterator<Item = Option<ContainerStats>>) {
        self.state
            .lock()
            .scripted_stats
            .entry(id.to_owned())
            .or_default()
            .extend(trace);
    }

    /// Kills a container's process without going through the runtime
    /// verbs, as if it crashed.
    pub fn crash(&self, id: &str) {
        if let Some(server) = self.state.lock().containers.get_mut(id).and_then(|c| c.server.take()) {
            server.kill();
        }
    }

    pub fn set_default_stats(&self, stats: ContainerStats) {
        self.state.lock().default_stats = stats;
    }

    fn guard(&self) -> Result<parking_lot::MutexGuard<'_, State>, EngineError> {
        let st = self.state.lock();
        if st.available {
            Ok(st)
        } else {
            Err(EngineError::Unavailable("mock runtime is down".into()))
        }
    }
}

#[async_trait]
impl ContainerRuntime for MockRuntime {
    async fn ping(&self) -> Result<(), EngineError> {
        self.guard().map(|_| ())
    }

    async fn build_image(&self, spec: &ImageSpec) -> Result<(), EngineError> {
        let mut st = self.guard()?;
        if st.fail_builds {
            return Err(EngineError::BuildFailed(format!("build of {} failed", spec.tag)));
        }
        st.images.insert(spec.tag.clone());
        Ok(())
    }

    async fn create(&self, name: &str, request: &CreateRequest) -> Result<String, EngineError> {
        let mut st = self.guard()?;
        if !st.images.contains(&request.image) {
            return Err(EngineError::Request(format!("no such image {}", request.image)));
        }
        st.next_id += 1;
        let id = format!("mock-{:06}", st.next_id);
        st.create_log.push(request.clone());
        st.containers.insert(
            id.clone(),
            MockContainer {
                name: name.to_owned(),
                request: request.clone(),
                server: None,
            },
        );
        Ok(id)
    }

    async fn start(&self, id: &str) -> Result<(), EngineError> {
        let request = {
            let st = self.guard()?;
            let c = st
                .containers
                .get(id)
                .ok_or_else(|| EngineError::NoSuchContainer(id.to_owned()))?;
            if c.server.is_some() {
                return Ok(());
            }
            c.request.clone()
        };
        let config = StubConfig::from_env(request.env.iter().filter_map(|kv| kv.split_once('=')));
        let server = StubServer::spawn(config, "127.0.0.1:0".parse().expect("loopback addr"))
            .await
            .map_err(|e| EngineError::Request(e.to_string()))?;
        let mut st = self.state.lock();
        match st.containers.get_mut(id) {
            Some(c) => {
                c.server = Some(server);
                Ok(())
            }
            None => Err(EngineError::NoSuchContainer(id.to_owned())),
        }
    }

    async fn endpoint(&self, id: &str) -> Result<String, EngineError> {
        let st = self.guard()?;
        st.containers
            .get(id)
            .and_then(|c| c.server.as_ref())
            .map(|s| s.addr().to_string())
            .ok_or_else(|| EngineError::NoSuchContainer(id.to_owned()))
    }

    async fn stop(&self, id: &str, _grace_secs: u64) -> Result<(), EngineError> {
        let mut st = self.guard()?;
        let c = st
            .containers
            .get_mut(id)
            .ok_or_else(|| EngineError::NoSuchContainer(id.to_owned()))?;
        if let Some(server) = c.server.take() {
            server.kill();
        }
        Ok(())
    }

    async fn remove(&self, id: &str) -> Result<(), EngineError> {
        let mut st = self.guard()?;
        st.scripted_stats.remove(id);
        st.containers
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| EngineError::NoSuchContainer(id.to_owned()))
    }

    async fn stats(&self, id: &str) -> Result<ContainerStats, EngineError> {
        let mut st = self.guard()?;
        let running = st.containers.get(id).is_some_and(|c| c.server.is_some());
        if !running {
            return Err(EngineError::NoSuchContainer(id.to_owned()));
        }
        let default = st.default_stats;
        match st.scripted_stats.get_mut(id).and_then(VecDeque::pop_front) {
            Some(Some(stats)) => Ok(stats),
            Some(None) => Err(EngineError::Request("stats source unreachable".into())),
            None => Ok(default),
        }
    }

    async fn list(&self) -> Result<Vec<String>, EngineError> {
        Ok(self.guard()?.containers.keys().cloned().collect())
    }
}
