//! Semi-empirical PEM fuel cell stack with double-layer and manifold gas dynamics.
//!
//! Cell voltage is the Nernst potential minus activation, ohmic and
//! concentration losses. The activation and concentration losses lag the
//! current through a charge double layer modelled as an RC element, and the
//! anode hydrogen and cathode oxygen pressures follow ideal-gas mass balances
//! with linear outflow through each manifold.
//!
//! Units follow fuel cell practice: pressures in atm, flows in standard litres
//! per minute, current in A, membrane area in cm², thickness in cm.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Faraday constant, C/mol.
pub const FARADAY: f64 = 96_485.332_12;
/// Universal gas constant in L·atm/(mol·K).
pub const GAS_CONSTANT: f64 = 0.082_057_366;
/// Molar volume at 0 °C and 1 atm, L/mol; converts standard flows to moles.
pub const MOLAR_VOLUME_STP: f64 = 22.413_969;
/// Lower bound applied to the current inside logarithmic loss terms.
pub const CURRENT_FLOOR: f64 = 0.1;
/// Internal integration step of the plant.
pub const PLANT_SUBSTEP: f64 = 0.01;

/// Convert a standard-litre-per-minute flow to mol/s.
#[inline]
pub fn slpm_to_mol_per_s(q: f64) -> f64 {
    q / 60.0 / MOLAR_VOLUME_STP
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackParams {
    pub n_cell: u32,
    /// Stack temperature, K.
    pub t_stack: f64,
    pub xi1: f64,
    pub xi2: f64,
    pub xi3: f64,
    pub xi4: f64,
    /// Contact resistance, Ω.
    pub r_contact: f64,
    /// Membrane thickness, cm.
    pub l_mem: f64,
    /// Active area, cm².
    pub a_mem: f64,
    /// Membrane water content parameter.
    pub lambda: f64,
    /// Concentration loss coefficient, V.
    pub beta: f64,
    /// Limiting current density, A/cm².
    pub j_max: f64,
    /// Double-layer capacitance, F.
    pub c_dl: f64,
}

impl Default for StackParams {
    /// Mann-type coefficients for a Nafion 117 stack sized for about 6 kW,
    /// with `n_cell` and `beta` trimmed by [`calibrate`] to 48 V at 110 A and
    /// mid-range flows.
    fn default() -> Self {
        StackParams {
            n_cell: 71,
            t_stack: 338.0,
            xi1: -0.948,
            xi2: 0.003_54,
            xi3: 7.6e-5,
            xi4: -1.93e-4,
            r_contact: 3.0e-4,
            l_mem: 0.0178,
            a_mem: 232.0,
            lambda: 23.0,
            beta: DEFAULT_BETA,
            j_max: 1.5,
            c_dl: 3.0,
        }
    }
}

/// Concentration coefficient produced by [`calibrate`] on the default stack.
const DEFAULT_BETA: f64 = 0.013_791_759_586_770_761;

impl StackParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("stack: {msg}")));
        if self.n_cell < 1 {
            return bad("n_cell must be at least 1");
        }
        if !(223.0..=373.0).contains(&self.t_stack) {
            return bad("t_stack must lie in [223, 373] K");
        }
        if !(self.j_max > 0.0) {
            return bad("j_max must be positive");
        }
        if !(self.c_dl > 0.0) {
            return bad("c_dl must be positive");
        }
        if !(self.a_mem > 0.0) {
            return bad("a_mem must be positive");
        }
        if !(self.l_mem > 0.0) {
            return bad("l_mem must be positive");
        }
        let all = [
            self.xi1,
            self.xi2,
            self.xi3,
            self.xi4,
            self.r_contact,
            self.lambda,
            self.beta,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return bad("coefficients must be finite");
        }
        Ok(())
    }

    /// Current density in A/cm².
    #[inline]
    pub fn current_density(&self, i_current: f64) -> f64 {
        i_current / self.a_mem
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GasParams {
    /// Anode manifold volume, L.
    pub v_anode: f64,
    /// Cathode manifold volume, L.
    pub v_cathode: f64,
    pub o2_fraction: f64,
    /// Anode outlet back-pressure, atm.
    pub p_out_anode: f64,
    /// Oxygen partial back-pressure at the cathode outlet, atm.
    pub p_out_cathode: f64,
    /// Anode outflow conductance, lpm/atm.
    pub k_out_anode: f64,
    /// Cathode oxygen outflow conductance, lpm/atm.
    pub k_out_cathode: f64,
}

impl Default for GasParams {
    fn default() -> Self {
        GasParams {
            v_anode: 1.0,
            v_cathode: 1.4,
            o2_fraction: 0.21,
            p_out_anode: 0.2,
            p_out_cathode: 0.1,
            k_out_anode: 137.5,
            k_out_cathode: 190.0,
        }
    }
}

impl GasParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("v_anode", self.v_anode),
            ("v_cathode", self.v_cathode),
            ("k_out_anode", self.k_out_anode),
            ("k_out_cathode", self.k_out_cathode),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("gas: {name} must be positive")));
            }
        }
        if !(self.o2_fraction > 0.0 && self.o2_fraction < 1.0) {
            return Err(Error::Config("gas: o2_fraction must lie in (0, 1)".into()));
        }
        if !(self.p_out_anode >= 0.0 && self.p_out_cathode >= 0.0) {
            return Err(Error::Config("gas: outlet pressures must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantParams {
    #[serde(default)]
    pub stack: StackParams,
    #[serde(default)]
    pub gas: GasParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    /// Anode hydrogen pressure, atm.
    pub p_h2: f64,
    /// Cathode oxygen partial pressure, atm.
    pub p_o2: f64,
    /// Double-layer voltage, V.
    pub v_a: f64,
    pub q_h2_act: f64,
    pub q_air_act: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantInput {
    /// Hydrogen flow, lpm.
    pub q_h2: f64,
    /// Air flow, lpm.
    pub q_air: f64,
    /// Stack current, A.
    pub current: f64,
}

impl PlantInput {
    pub fn new(q_h2: f64, q_air: f64, current: f64) -> Self {
        PlantInput {
            q_h2,
            q_air,
            current,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub v_fc: f64,
    pub p_h2: f64,
}

/// Reversible cell potential from temperature and reactant pressures.
pub fn nernst_potential(params: &StackParams, p_h2: f64, p_o2: f64) -> Result<f64> {
    if !(p_h2 > 0.0) || !(p_o2 > 0.0) {
        return Err(Error::Domain(format!(
            "Nernst potential needs positive pressures, got p_h2={p_h2}, p_o2={p_o2}"
        )));
    }
    let t = params.t_stack;
    Ok(1.229 - 0.85e-3 * (t - 298.15) + 4.3085e-5 * t * (p_h2.ln() + 0.5 * p_o2.ln()))
}

/// Dissolved oxygen concentration at the cathode catalyst interface.
pub fn oxygen_concentration(params: &StackParams, p_o2: f64) -> f64 {
    p_o2 / (5.08e6 * (-498.0 / params.t_stack).exp())
}

/// Activation loss per cell. The current must be strictly positive.
pub fn activation_drop(params: &StackParams, p_o2: f64, i_current: f64) -> Result<f64> {
    if !(i_current > 0.0) {
        return Err(Error::Domain(format!(
            "activation loss needs positive current, got {i_current}"
        )));
    }
    if !(p_o2 > 0.0) {
        return Err(Error::Domain(format!(
            "activation loss needs positive oxygen pressure, got {p_o2}"
        )));
    }
    let t = params.t_stack;
    let c_o2 = oxygen_concentration(params, p_o2);
    Ok(-(params.xi1 + params.xi2 * t + params.xi3 * t * c_o2.ln() + params.xi4 * t * i_current.ln()))
}

/// Membrane resistivity in Ω·cm at the given current.
pub fn membrane_resistivity(params: &StackParams, i_current: f64) -> Result<f64> {
    let i = params.current_density(i_current);
    let t = params.t_stack;
    let denom_water = params.lambda - 0.643 - 3.0 * i;
    if !(denom_water > 0.0) {
        return Err(Error::MembraneSingular(denom_water));
    }
    let num = 181.6 * (1.0 + 0.03 * i + 0.062 * (t / 303.0).powi(2) * i.powf(2.5));
    Ok(num / (denom_water * (4.18 * (t - 303.0) / t).exp()))
}

/// Ohmic loss per cell.
pub fn ohmic_drop(params: &StackParams, i_current: f64) -> Result<f64> {
    if !(i_current >= 0.0) {
        return Err(Error::Domain(format!(
            "ohmic loss needs non-negative current, got {i_current}"
        )));
    }
    let rho = membrane_resistivity(params, i_current)?;
    let r_mem = rho * params.l_mem / params.a_mem;
    Ok(i_current * (r_mem + params.r_contact))
}

/// Concentration loss per cell.
pub fn concentration_drop(params: &StackParams, i_current: f64) -> Result<f64> {
    let i = params.current_density(i_current);
    if !(i >= 0.0) {
        return Err(Error::Domain(format!(
            "concentration loss needs non-negative current, got {i_current}"
        )));
    }
    if i >= params.j_max {
        return Err(Error::Saturation {
            density: i,
            limit: params.j_max,
        });
    }
    Ok(-params.beta * (1.0 - i / params.j_max).ln())
}

/// Steady double-layer voltage for the given oxygen pressure and current.
pub fn double_layer_equilibrium(params: &StackParams, p_o2: f64, i_current: f64) -> Result<f64> {
    let i_eff = i_current.max(CURRENT_FLOOR);
    Ok(activation_drop(params, p_o2, i_eff)? + concentration_drop(params, i_current)?)
}

/// Stack output voltage, `n_cell * (E - V_a - V_ohmic)`.
pub fn output_voltage(state: &PlantState, input: &PlantInput, params: &StackParams) -> Result<f64> {
    let e = nernst_potential(params, state.p_h2, state.p_o2)?;
    let ohm = ohmic_drop(params, input.current)?;
    Ok(params.n_cell as f64 * (e - state.v_a - ohm))
}

/// Time derivatives of `(p_h2, p_o2, v_a)`.
fn derivatives(params: &PlantParams, y: [f64; 3], input: &PlantInput) -> Result<[f64; 3]> {
    let stack = &params.stack;
    let gas = &params.gas;
    let [p_h2, p_o2, v_a] = y;
    let n = stack.n_cell as f64;
    let rt = GAS_CONSTANT * stack.t_stack;

    let h2_in = slpm_to_mol_per_s(input.q_h2);
    let h2_used = n * input.current / (2.0 * FARADAY);
    let h2_out = slpm_to_mol_per_s(gas.k_out_anode * (p_h2 - gas.p_out_anode));
    let dp_h2 = rt / gas.v_anode * (h2_in - h2_used - h2_out);

    let o2_in = slpm_to_mol_per_s(gas.o2_fraction * input.q_air);
    let o2_used = n * input.current / (4.0 * FARADAY);
    let o2_out = slpm_to_mol_per_s(gas.k_out_cathode * (p_o2 - gas.p_out_cathode));
    let dp_o2 = rt / gas.v_cathode * (o2_in - o2_used - o2_out);

    // RC element: dV_a/dt = I/C - V_a/(R_a C) with R_a = (V_act + V_con)/I.
    let i_eff = input.current.max(CURRENT_FLOOR);
    let v_eq = double_layer_equilibrium(stack, p_o2, input.current)?;
    let r_a = v_eq / i_eff;
    let dv_a = i_eff / stack.c_dl - v_a / (r_a * stack.c_dl);

    Ok([dp_h2, dp_o2, dv_a])
}

/// Fixed-step RK4 integration over `dt` with `substeps` equal steps.
pub fn integrate_rk4(
    params: &PlantParams,
    state: &PlantState,
    input: &PlantInput,
    dt: f64,
    substeps: usize,
) -> Result<PlantState> {
    if !(dt > 0.0) || substeps == 0 {
        return Err(Error::Input(format!("invalid step dt={dt}, substeps={substeps}")));
    }
    let h = dt / substeps as f64;
    let mut y = [state.p_h2, state.p_o2, state.v_a];
    let axpy = |y: &[f64; 3], k: &[f64; 3], s: f64| [y[0] + s * k[0], y[1] + s * k[1], y[2] + s * k[2]];
    for _ in 0..substeps {
        let k1 = derivatives(params, y, input)?;
        let k2 = derivatives(params, axpy(&y, &k1, 0.5 * h), input)?;
        let k3 = derivatives(params, axpy(&y, &k2, 0.5 * h), input)?;
        let k4 = derivatives(params, axpy(&y, &k3, h), input)?;
        for j in 0..3 {
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
    }
    let next = PlantState {
        p_h2: y[0],
        p_o2: y[1],
        v_a: y[2],
        q_h2_act: input.q_h2,
        q_air_act: input.q_air,
    };
    if !(next.p_h2 > 0.0 && next.p_o2 > 0.0) {
        return Err(Error::Domain(format!(
            "manifold pressure collapsed: p_h2={}, p_o2={}",
            next.p_h2, next.p_o2
        )));
    }
    Ok(next)
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        self.stack.validate()?;
        self.gas.validate()
    }

    /// Advance the plant by `dt` seconds holding `input` constant.
    pub fn step(&self, state: &PlantState, input: &PlantInput, dt: f64) -> Result<PlantState> {
        if !(dt > 0.0) {
            return Err(Error::Input(format!("step needs dt > 0, got {dt}")));
        }
        if !(input.q_h2 >= 0.0 && input.q_air >= 0.0 && input.current >= 0.0) {
            return Err(Error::Input(format!("plant inputs must be non-negative: {input:?}")));
        }
        let substeps = (dt / PLANT_SUBSTEP).ceil().max(1.0) as usize;
        integrate_rk4(self, state, input, dt, substeps)
    }

    /// Equilibrium of the gas balances and double layer for a constant input.
    pub fn steady_state(&self, input: &PlantInput) -> Result<PlantState> {
        let stack = &self.stack;
        let gas = &self.gas;
        let n = stack.n_cell as f64;
        // Express reaction rates as equivalent standard flows.
        let h2_used = n * input.current / (2.0 * FARADAY) * 60.0 * MOLAR_VOLUME_STP;
        let o2_used = n * input.current / (4.0 * FARADAY) * 60.0 * MOLAR_VOLUME_STP;
        let p_h2 = gas.p_out_anode + (input.q_h2 - h2_used) / gas.k_out_anode;
        let p_o2 = gas.p_out_cathode + (gas.o2_fraction * input.q_air - o2_used) / gas.k_out_cathode;
        if !(p_h2 > 0.0 && p_o2 > 0.0) {
            return Err(Error::Domain(format!(
                "no positive steady state: p_h2={p_h2}, p_o2={p_o2}"
            )));
        }
        let v_a = double_layer_equilibrium(stack, p_o2, input.current)?;
        Ok(PlantState {
            p_h2,
            p_o2,
            v_a,
            q_h2_act: input.q_h2,
            q_air_act: input.q_air,
        })
    }

    pub fn output_voltage(&self, state: &PlantState, input: &PlantInput) -> Result<f64> {
        output_voltage(state, input, &self.stack)
    }
}

/// Measurement noise standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseStd {
    /// Voltage noise, V.
    pub voltage: f64,
    /// Hydrogen pressure noise, atm.
    pub pressure: f64,
}

impl Default for NoiseStd {
    fn default() -> Self {
        NoiseStd {
            voltage: 0.05,
            pressure: 0.005,
        }
    }
}

impl NoiseStd {
    pub const ZERO: NoiseStd = NoiseStd {
        voltage: 0.0,
        pressure: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.voltage >= 0.0 && self.pressure >= 0.0) {
            return Err(Error::Config("noise standard deviations must be >= 0".into()));
        }
        Ok(())
    }
}

/// Noisy voltage and hydrogen pressure readings drawn from `rng`.
pub fn measure_with<R: rand::Rng + ?Sized>(
    params: &StackParams,
    state: &PlantState,
    input: &PlantInput,
    noise: &NoiseStd,
    rng: &mut R,
) -> Result<Measurement> {
    let v = output_voltage(state, input, params)?;
    let mut m = Measurement {
        v_fc: v,
        p_h2: state.p_h2,
    };
    // Always draw both samples so the stream position does not depend on the noise level.
    let dv: f64 = Normal::new(0.0, 1.0).unwrap().sample(rng);
    let dp: f64 = Normal::new(0.0, 1.0).unwrap().sample(rng);
    m.v_fc += noise.voltage * dv;
    m.p_h2 += noise.pressure * dp;
    Ok(m)
}

/// Seeded single-shot variant of [`measure_with`].
pub fn measure(
    params: &StackParams,
    state: &PlantState,
    input: &PlantInput,
    noise: &NoiseStd,
    rng_seed: u64,
) -> Result<Measurement> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    measure_with(params, state, input, noise, &mut rng)
}

/// Mid-range operating point used for calibration and initial conditions.
pub const NOMINAL_INPUT: PlantInput = PlantInput {
    q_h2: 250.0,
    q_air: 500.0,
    current: 110.0,
};

/// Pick `n_cell` closest to `target` volts at `input`, then trim `beta` so the
/// steady output matches the target.
pub fn calibrate(params: &PlantParams, input: &PlantInput, target: f64) -> Result<PlantParams> {
    let mut p = *params;
    let voltage_at = |p: &PlantParams| -> Result<f64> {
        let s = p.steady_state(input)?;
        p.output_voltage(&s, input)
    };

    // Voltage grows monotonically with n_cell; bisect for the last count at or below target.
    // Counts that starve the manifolds count as too many.
    let (mut lo, mut hi) = (1u32, 1000u32);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        p.stack.n_cell = mid;
        if matches!(voltage_at(&p), Ok(v) if v <= target) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let pick = |n: u32, p: &mut PlantParams| -> Result<f64> {
        p.stack.n_cell = n;
        Ok((voltage_at(p)? - target).abs())
    };
    let err_lo = pick(lo, &mut p)?;
    let err_hi = pick(hi, &mut p).unwrap_or(f64::INFINITY);
    p.stack.n_cell = if err_lo <= err_hi { lo } else { hi };

    // Voltage decreases with beta.
    let (mut b_lo, mut b_hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (b_lo + b_hi);
        p.stack.beta = mid;
        if voltage_at(&p)? > target {
            b_lo = mid;
        } else {
            b_hi = mid;
        }
    }
    p.stack.beta = 0.5 * (b_lo + b_hi);
    if (voltage_at(&p)? - target).abs() > 1e-6 {
        return Err(Error::Numerical(format!(
            "calibration could not reach {target} V with non-negative beta"
        )));
    }
    Ok(p)
}

/// A plant instance: parameters plus its evolving state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plant {
    pub params: PlantParams,
    pub state: PlantState,
}

impl Plant {
    /// Plant resting at the equilibrium of `input`.
    pub fn at_steady_state(params: PlantParams, input: &PlantInput) -> Result<Self> {
        let state = params.steady_state(input)?;
        Ok(Plant { params, state })
    }

    pub fn advance(&mut self, input: &PlantInput, dt: f64) -> Result<()> {
        self.state = self.params.step(&self.state, input, dt)?;
        Ok(())
    }

    pub fn voltage(&self, input: &PlantInput) -> Result<f64> {
        self.params.output_voltage(&self.state, input)
    }
}
