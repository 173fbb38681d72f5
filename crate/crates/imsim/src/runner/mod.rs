//! Scenario runner: builds the node world from a scenario, injects the
//! action list through the event loop and evaluates the expectations.

mod gateway;
mod mediactl;
mod policyctl;
mod registration;
mod session;
mod world;

pub use world::ImsWorld;

use crate::netsim::{NetWorld, Sim};
use crate::scenario::{Action, Scenario};

/// Budget applied to each action's quiescence run.
const TICK_BUDGET: u64 = 100_000;

/// Result of one expectation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpectResult {
    pub description: String,
    pub passed: bool,
    pub detail: String,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub trace: String,
    pub cdr: String,
    pub expects: Vec<ExpectResult>,
    pub exit_code: i32,
}

impl RunReport {
    pub fn all_passed(&self) -> bool {
        self.expects.iter().all(|e| e.passed)
    }
}

/// Owns one simulation from scenario to report.
pub struct Runner {
    sim: Sim,
    world: ImsWorld,
    scenario: Scenario,
}

impl Runner {
    pub fn new(scenario: Scenario, seed: u64) -> Self {
        let mut sim = Sim::new(seed);
        let world = ImsWorld::build(&scenario, &mut sim);
        Self {
            sim,
            world,
            scenario,
        }
    }

    pub fn world(&self) -> &ImsWorld {
        &self.world
    }

    pub fn sim(&self) -> &Sim {
        &self.sim
    }

    /// Executes every action in order, each run to quiescence, then
    /// evaluates the expectations.
    pub fn run(mut self) -> RunReport {
        self.run_to_completion()
    }

    /// Like [`Runner::run`] but keeps the runner alive so tests can
    /// inspect final world state.
    pub fn run_to_completion(&mut self) -> RunReport {
        self.world.provision_policies(&mut self.sim);
        let _ = self.sim.run_until_quiescent(&mut self.world, TICK_BUDGET);

        let actions: Vec<Action> = self.scenario.actions.clone();
        for action in actions {
            self.world.inject_action(&mut self.sim, &action);
            let budget = self.sim.now() + TICK_BUDGET;
            let _ = self.sim.run_until_quiescent(&mut self.world, budget);
            self.world.finish_pending_flows(&mut self.sim);
            self.sim.advance(1);
        }

        let expects = self.evaluate_expects();
        let exit_code = i32::from(!expects.iter().all(|e| e.passed));
        RunReport {
            trace: self.sim.trace().render(),
            cdr: self.world.cdr_log().dump(),
            expects,
            exit_code,
        }
    }

    fn evaluate_expects(&self) -> Vec<ExpectResult> {
        let trace_text = self.sim.trace().render();
        self.scenario
            .expects
            .iter()
            .map(|e| self.world.evaluate_expect(e, &trace_text, self.sim.now()))
            .collect()
    }
}

/// Loads, runs and reports in one step; the CLI entry point.
pub fn run_scenario(scenario: Scenario, seed: u64) -> RunReport {
    Runner::new(scenario, seed).run()
}

impl NetWorld for ImsWorld {
    fn deliver(&mut self, sim: &mut Sim, ev: crate::netsim::Event) {
        self.dispatch(sim, ev);
    }
}

pub use world::{Flow, FlowOutcome};
