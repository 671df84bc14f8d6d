//! One engine, one testbed, and the managers that connect them.

use std::path::PathBuf;
use std::sync::{Arc, Weak};
use std::time::Duration;

use crate::data::DataManager;
use crate::engine::{Engine, IncidentObserver};
use crate::machine::{ConnectorError, JobEventListener, MachineConfig, MachineConnector, MachineRegistry};
use crate::simulation::{MachineSelectionPolicy, SimulationError, SimulationManager};
use crate::testbed::Testbed;

#[derive(Debug, thiserror::Error)]
pub enum PlatformError {
    #[error(transparent)]
    Registry(#[from] crate::machine::RegistryError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error("could not create machine root {path}: {source}")]
    Root {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Stage handlers reach the managers with `ctx.service::<Platform>()`.
pub struct Platform {
    pub engine: Arc<Engine>,
    pub testbed: Arc<Testbed>,
    pub simulations: Arc<SimulationManager>,
    pub data: Arc<DataManager>,
}

impl Platform {
    pub fn new(engine: Arc<Engine>, machines: Vec<MachineConfig>) -> Result<Arc<Self>, PlatformError> {
        Self::with_policy(engine, machines, None)
    }

    pub fn with_policy(
        engine: Arc<Engine>,
        machines: Vec<MachineConfig>,
        policy: Option<Box<dyn MachineSelectionPolicy>>,
    ) -> Result<Arc<Self>, PlatformError> {
        for m in &machines {
            std::fs::create_dir_all(&m.filesystem_root).map_err(|source| PlatformError::Root {
                path: m.filesystem_root.clone(),
                source,
            })?;
        }
        let registry = MachineRegistry::new(machines.clone())?;
        let testbed = Arc::new(Testbed::new(machines)?);
        let connectors: Vec<Arc<dyn MachineConnector>> = testbed
            .machine_names()
            .iter()
            .map(|n| Arc::new(testbed.connector(n).expect("machine exists")) as Arc<dyn MachineConnector>)
            .collect();
        let mut sims = SimulationManager::new(Arc::clone(&engine), registry.clone(), connectors)?;
        if let Some(p) = policy {
            sims = sims.with_policy(p);
        }
        let simulations = Arc::new(sims);
        let data = Arc::new(DataManager::new(registry).with_engine(Arc::clone(&engine)));

        let listener: Arc<dyn JobEventListener> = simulations.clone();
        testbed.set_listener(Arc::downgrade(&listener));
        let observer: Arc<dyn IncidentObserver> = simulations.clone();
        engine.set_observer(Arc::downgrade(&observer));

        let platform = Arc::new(Self {
            engine,
            testbed,
            simulations,
            data,
        });
        let weak: Weak<Platform> = Arc::downgrade(&platform);
        platform.engine.set_services(weak);
        Ok(platform)
    }

    /// Alternate engine dispatch and testbed events until neither has work.
    /// Returns the virtual time at which everything went quiet.
    pub fn run_until_idle(&self) -> Result<Duration, ConnectorError> {
        loop {
            let handled = self.engine.run_pending();
            let stepped = self.testbed.step()?;
            if handled == 0 && !stepped {
                return Ok(self.testbed.now());
            }
        }
    }
}
