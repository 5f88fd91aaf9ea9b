//! Controlled shutdown: CC.SHN opens a window during which registered hooks
//! may touch the backing store while the host has the filesystem unmounted.

use serde_json::json;

use super::regs::ShutdownStatus;
use super::Controller;
use crate::backend::BlockStore;
use crate::event::{Actor, EventLog, SimTime};
use crate::host::Host;

/// Outcome of one hook invocation. `elapsed` is the simulated time the hook
/// consumed; the controller compares it against the remaining window budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HookRun {
    pub elapsed: SimTime,
    pub ok: bool,
    pub detail: serde_json::Value,
}

/// Work done inside the shutdown window. Hooks run once and are dropped.
pub trait ShutdownHook: Send {
    fn name(&self) -> &str;
    fn run(&mut self, store: &mut BlockStore, log: &mut EventLog) -> HookRun;
}

impl Controller {
    pub(super) fn begin_shutdown(&mut self, host: &mut Host, shn: u32) {
        if self.shst != ShutdownStatus::Normal {
            return;
        }
        self.shst = ShutdownStatus::Processing;
        host.log.push(
            Actor::Device,
            "shutdown-processing",
            json!({ "abrupt": shn == 0b10, "hooks": self.hooks.len() }),
        );
        self.with_malice(host, |m, ctx| m.on_shutdown_notice(ctx));
        let budget = self.cfg.shutdown_budget;
        let mut used = SimTime::ZERO;
        let hooks = std::mem::take(&mut self.hooks);
        let mut overrun = false;
        for mut hook in hooks {
            if overrun || self.store.is_dead() {
                host.log.push(
                    Actor::Device,
                    "hook-skipped",
                    json!({ "hook": hook.name() }),
                );
                continue;
            }
            let snap = self.store.snapshot().ok();
            let mark = host.log.next_seq();
            let run = hook.run(&mut self.store, &mut host.log);
            let remaining = budget.saturating_sub(used);
            if run.elapsed > remaining {
                if let Some(s) = &snap {
                    let _ = self.store.restore(s);
                }
                overrun = true;
                used = budget;
                host.log.push(
                    Actor::Device,
                    "window-overrun",
                    json!({
                        "hook": hook.name(),
                        "elapsed_ms": run.elapsed.as_millis(),
                        "budget_ms": remaining.as_millis(),
                        "rolled_back_from_seq": mark,
                    }),
                );
            } else {
                used = used.saturating_add(run.elapsed);
                host.log.push(
                    Actor::Device,
                    "hook-run",
                    json!({
                        "hook": hook.name(),
                        "ok": run.ok,
                        "elapsed_ms": run.elapsed.as_millis(),
                        "detail": run.detail,
                    }),
                );
            }
        }
        self.shutdown_complete_at = Some(host.clock.saturating_add(used));
        self.sync(host);
    }
}
