//! Battery / umbilical power bookkeeping, endurance and fault monitoring.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

use crate::modes::LinkMode;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerError {
    #[error("load for {0:?} must be finite and >= 0")]
    InvalidLoad(Subsystem),
    #[error("invalid power parameter: {0}")]
    InvalidParams(&'static str),
    #[error("dt must be positive")]
    InvalidStep,
}

/// Declared in load-shedding order: payload goes first, computers last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subsystem {
    Payload,
    Comms,
    Limbs,
    Propulsion,
    Computers,
}

impl Subsystem {
    pub const ALL: [Subsystem; 5] =
        [Subsystem::Payload, Subsystem::Comms, Subsystem::Limbs, Subsystem::Propulsion, Subsystem::Computers];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerSource {
    Battery,
    Umbilical,
}

pub type Loads = BTreeMap<Subsystem, f64>;

/// Tethered operation runs from the umbilical, untethered from the battery.
pub fn source_for(link: LinkMode) -> PowerSource {
    match link {
        LinkMode::Tet => PowerSource::Umbilical,
        LinkMode::Nowire => PowerSource::Battery,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerParams {
    pub battery_voltage: f64,
    pub battery_capacity_ah: f64,
    pub umbilical_bus_voltage: f64,
    pub umbilical_limit_w: f64,
    pub charger_w: f64,
    pub window_s: f64,
    /// Per-subsystem overcurrent thresholds, A.
    pub overcurrent_a: BTreeMap<Subsystem, f64>,
    pub undervoltage_v: f64,
    pub debounce_s: f64,
}

impl Default for PowerParams {
    fn default() -> Self {
        Self {
            battery_voltage: 25.2,
            battery_capacity_ah: 14.0,
            umbilical_bus_voltage: 28.0,
            umbilical_limit_w: 3000.0,
            charger_w: 300.0,
            window_s: 60.0,
            overcurrent_a: BTreeMap::from([
                (Subsystem::Payload, 4.0),
                (Subsystem::Comms, 2.0),
                (Subsystem::Limbs, 6.0),
                (Subsystem::Propulsion, 20.0),
                (Subsystem::Computers, 4.0),
            ]),
            undervoltage_v: 22.0,
            debounce_s: 1.0,
        }
    }
}

impl PowerParams {
    /// Battery energy, Wh.
    pub fn capacity_wh(&self) -> f64 {
        self.battery_voltage * self.battery_capacity_ah
    }

    pub fn validate(&self) -> Result<(), PowerError> {
        let positive = [
            (self.battery_voltage, "battery_voltage"),
            (self.battery_capacity_ah, "battery_capacity_ah"),
            (self.umbilical_bus_voltage, "umbilical_bus_voltage"),
            (self.umbilical_limit_w, "umbilical_limit_w"),
            (self.window_s, "window_s"),
        ];
        for (v, name) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PowerError::InvalidParams(name));
            }
        }
        if !(self.charger_w >= 0.0 && self.debounce_s >= 0.0 && self.undervoltage_v >= 0.0) {
            return Err(PowerError::InvalidParams("charger_w, debounce_s and undervoltage_v must be >= 0"));
        }
        if self.overcurrent_a.values().any(|a| !(*a > 0.0)) {
            return Err(PowerError::InvalidParams("overcurrent thresholds must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerState {
    pub source: PowerSource,
    /// Stored energy, Wh.
    pub soc: f64,
    pub bus_voltage: f64,
    /// Loads actually served, W.
    pub loads: Loads,
    /// Subsystems shed in the last step.
    pub shed: Vec<Subsystem>,
    /// Mean total load over the rolling window, W.
    pub rolling_mean: f64,
    /// Power drawn from the source in the last step (loads plus charger), W.
    pub source_power: f64,
    #[serde(skip)]
    window: VecDeque<f64>,
}

impl PowerState {
    pub fn new(source: PowerSource, soc: f64, params: &PowerParams) -> Self {
        let bus_voltage = match source {
            PowerSource::Battery if soc > 0.0 => params.battery_voltage,
            PowerSource::Battery => 0.0,
            PowerSource::Umbilical => params.umbilical_bus_voltage,
        };
        Self {
            source,
            soc: soc.clamp(0.0, params.capacity_wh()),
            bus_voltage,
            loads: Loads::new(),
            shed: Vec::new(),
            rolling_mean: 0.0,
            source_power: 0.0,
            window: VecDeque::new(),
        }
    }

    pub fn full_battery(params: &PowerParams) -> Self {
        Self::new(PowerSource::Battery, params.capacity_wh(), params)
    }

    pub fn total_load(&self) -> f64 {
        self.loads.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PowerEvent {
    /// The battery is empty.
    PowerFail,
    /// Umbilical demand above the limit; listed subsystems were shed.
    Overload { requested_w: f64, shed: Vec<Subsystem> },
}

/// Advance the power model by `dt` with the requested loads.
///
/// Battery: `soc -= total dt / 3600`, bus at the nominal battery voltage
/// until empty. Umbilical: whole subsystems are shed in priority order until
/// the demand fits the source limit, and the remaining headroom (up to the
/// charger rating) recharges the battery. The rolling mean assumes the
/// uniform step of the simulation clock.
pub fn step_power(
    state: &PowerState,
    requested: &Loads,
    params: &PowerParams,
    dt: f64,
) -> Result<(PowerState, Vec<PowerEvent>), PowerError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(PowerError::InvalidStep);
    }
    for (s, w) in requested {
        if !(*w >= 0.0 && w.is_finite()) {
            return Err(PowerError::InvalidLoad(*s));
        }
    }
    let mut next = state.clone();
    let mut events = Vec::new();
    let mut served = requested.clone();
    next.shed.clear();
    let capacity = params.capacity_wh();
    match state.source {
        PowerSource::Battery => {
            let total: f64 = served.values().sum();
            if state.soc <= 0.0 {
                served.values_mut().for_each(|w| *w = 0.0);
                next.soc = 0.0;
            } else {
                let soc = state.soc - total * dt / 3600.0;
                if soc <= 0.0 {
                    next.soc = 0.0;
                    events.push(PowerEvent::PowerFail);
                } else {
                    next.soc = soc;
                }
            }
            next.bus_voltage = if next.soc > 0.0 { params.battery_voltage } else { 0.0 };
            next.source_power = served.values().sum();
        }
        PowerSource::Umbilical => {
            let requested_w: f64 = served.values().sum();
            let mut total = requested_w;
            if total > params.umbilical_limit_w {
                for s in Subsystem::ALL {
                    if total <= params.umbilical_limit_w {
                        break;
                    }
                    if let Some(w) = served.get_mut(&s) {
                        if *w > 0.0 {
                            total -= *w;
                            *w = 0.0;
                            next.shed.push(s);
                        }
                    }
                }
                events.push(PowerEvent::Overload { requested_w, shed: next.shed.clone() });
            }
            let headroom = (params.umbilical_limit_w - total).max(0.0);
            let charge_w = params.charger_w.min(headroom).min((capacity - state.soc) * 3600.0 / dt);
            next.soc = (state.soc + charge_w * dt / 3600.0).min(capacity);
            next.bus_voltage = params.umbilical_bus_voltage;
            next.source_power = total + charge_w;
        }
    }
    let total: f64 = served.values().sum();
    next.loads = served;
    let keep = (params.window_s / dt).round().max(1.0) as usize;
    next.window.push_back(total);
    while next.window.len() > keep {
        next.window.pop_front();
    }
    next.rolling_mean = next.window.iter().sum::<f64>() / next.window.len() as f64;
    Ok((next, events))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "hours", rename_all = "snake_case")]
pub enum Endurance {
    Hours(f64),
    Unbounded,
}

/// Remaining endurance at the rolling-mean load.
pub fn endurance_estimate(state: &PowerState) -> Endurance {
    match state.source {
        PowerSource::Umbilical => Endurance::Unbounded,
        PowerSource::Battery if state.rolling_mean > 0.0 => Endurance::Hours(state.soc / state.rolling_mean),
        PowerSource::Battery => Endurance::Unbounded,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "subsystem", rename_all = "snake_case")]
pub enum PowerFault {
    Overcurrent(Subsystem),
    Undervoltage,
}

/// Debounce timers of the fault monitor.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FaultMonitor {
    above: BTreeMap<Subsystem, f64>,
}

/// Flag subsystems whose current has exceeded their threshold for longer than
/// the debounce time, and an undervoltage bus.
pub fn detect_faults(
    monitor: &FaultMonitor,
    state: &PowerState,
    params: &PowerParams,
    dt: f64,
) -> (FaultMonitor, Vec<PowerFault>) {
    let mut next = FaultMonitor::default();
    let mut faults = Vec::new();
    for (s, limit) in &params.overcurrent_a {
        let w = state.loads.get(s).copied().unwrap_or(0.0);
        let amps = if state.bus_voltage > 0.0 { w / state.bus_voltage } else { 0.0 };
        if amps > *limit {
            let t = monitor.above.get(s).copied().unwrap_or(0.0) + dt;
            next.above.insert(*s, t);
            if t > params.debounce_s + 1e-9 {
                faults.push(PowerFault::Overcurrent(*s));
            }
        }
    }
    if state.bus_voltage < params.undervoltage_v {
        faults.push(PowerFault::Undervoltage);
    }
    (next, faults)
}
