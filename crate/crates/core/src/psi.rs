//! Analytic eigenstate superpositions of the 2D oscillator and the 2D box.
//!
//! Units are `hbar = 1`. The oscillator carries its own mass and angular
//! frequency (both 1 for the reference system); the box has side `pi` and
//! unit mass, so a mode `(n1, n2)` has energy `(n1^2 + n2^2) / 2`.
//!
//! Wave functions are evaluated together with their exact gradient (and,
//! on request, Laplacian) from per-axis eigenfunction tables, so a single
//! call costs one short recurrence per axis plus one pass over the modes.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{invalid, Error, Result};
use crate::special::{box_modes, hermite_functions};

pub type C64 = Complex64;

/// Per-axis tables up to this length live on the stack.
const STACK: usize = 16;

fn table<'a>(stack: &'a mut [C64; 3 * STACK], heap: &'a mut Vec<C64>, len: usize) -> &'a mut [C64] {
    if len <= stack.len() {
        &mut stack[..len]
    } else {
        *heap = vec![C64::new(0.0, 0.0); len];
        heap
    }
}

/// Which one-particle system the modes belong to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum System {
    Oscillator { mass: f64, omega: f64 },
    /// Infinite square well on `[0, pi]^2`, unit mass.
    Box,
}

impl System {
    pub const UNIT_OSCILLATOR: System = System::Oscillator { mass: 1.0, omega: 1.0 };

    pub fn mass(&self) -> f64 {
        match *self {
            System::Oscillator { mass, .. } => mass,
            System::Box => 1.0,
        }
    }

    /// Smallest allowed quantum number per axis.
    pub fn min_quantum_number(&self) -> u32 {
        match self {
            System::Oscillator { .. } => 0,
            System::Box => 1,
        }
    }

    /// Energy carried by one axis in state `n`.
    pub fn axis_energy(&self, n: u32) -> f64 {
        match *self {
            System::Oscillator { omega, .. } => omega * (n as f64 + 0.5),
            System::Box => 0.5 * (n as f64) * (n as f64),
        }
    }

    pub fn energy(&self, n1: u32, n2: u32) -> f64 {
        self.axis_energy(n1) + self.axis_energy(n2)
    }

    /// Classical potential at `q`; zero inside the box.
    pub fn potential(&self, q: [f64; 2]) -> f64 {
        match *self {
            System::Oscillator { mass, omega } => {
                0.5 * mass * omega * omega * (q[0] * q[0] + q[1] * q[1])
            }
            System::Box => 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if let System::Oscillator { mass, omega } = *self {
            if !(mass > 0.0 && mass.is_finite() && omega > 0.0 && omega.is_finite()) {
                return Err(invalid(format!(
                    "oscillator needs positive finite mass and omega (got {mass}, {omega})"
                )));
            }
        }
        Ok(())
    }
}

/// One product eigenstate `phi_{n1}(q1) phi_{n2}(q2)` with its complex weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mode {
    pub n1: u32,
    pub n2: u32,
    pub amplitude: C64,
}

impl Mode {
    pub fn new(n1: u32, n2: u32, amplitude: C64) -> Self {
        Self { n1, n2, amplitude }
    }
}

/// Value of a wave function and its gradient at one configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaveValue {
    pub psi: C64,
    pub grad: [C64; 2],
    pub density: f64,
    /// `Im(grad psi / psi)`, absent where the density vanishes.
    pub phase_grad: Option<[f64; 2]>,
}

impl WaveValue {
    pub fn from_parts(psi: C64, grad: [C64; 2]) -> Self {
        let density = psi.norm_sqr();
        let phase_grad = (density > 0.0).then(|| [(grad[0] / psi).im, (grad[1] / psi).im]);
        Self { psi, grad, density, phase_grad }
    }
}

/// A normalized, immutable superposition of product eigenstates.
#[derive(Clone, Debug, PartialEq)]
pub struct Superposition {
    system: System,
    modes: Vec<Mode>,
    t0: f64,
    /// Table length needed along each axis.
    table_len: [usize; 2],
    /// Row-major `table_len[0] x table_len[1]` amplitude matrix, when small enough.
    dense: Option<Vec<C64>>,
}

const DENSE_LIMIT: usize = 1024;

impl Superposition {
    /// Builds a superposition, requiring `sum |c_n|^2 = 1` to within `1e-12`.
    pub fn new(system: System, modes: Vec<Mode>, t0: f64) -> Result<Self> {
        system.validate()?;
        if modes.is_empty() {
            return Err(invalid("superposition needs at least one mode"));
        }
        if !t0.is_finite() {
            return Err(invalid("reference time must be finite"));
        }
        let nmin = system.min_quantum_number();
        let mut seen = std::collections::HashSet::new();
        for m in &modes {
            if m.n1 < nmin || m.n2 < nmin {
                return Err(invalid(format!(
                    "mode ({}, {}) below the lowest quantum number {nmin}",
                    m.n1, m.n2
                )));
            }
            if !(m.amplitude.re.is_finite() && m.amplitude.im.is_finite()) {
                return Err(invalid(format!("mode ({}, {}) has a non-finite amplitude", m.n1, m.n2)));
            }
            if !seen.insert((m.n1, m.n2)) {
                return Err(invalid(format!("mode ({}, {}) listed twice", m.n1, m.n2)));
            }
        }
        let norm: f64 = modes.iter().map(|m| m.amplitude.norm_sqr()).sum();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("sum |c_n|^2 = {norm}, expected 1")));
        }
        let offset = nmin as usize;
        let table_len = [
            modes.iter().map(|m| m.n1 as usize).max().unwrap() + 1 - offset,
            modes.iter().map(|m| m.n2 as usize).max().unwrap() + 1 - offset,
        ];
        let dense = (table_len[0] * table_len[1] <= DENSE_LIMIT).then(|| {
            let mut c = vec![C64::new(0.0, 0.0); table_len[0] * table_len[1]];
            for m in &modes {
                c[(m.n1 as usize - offset) * table_len[1] + m.n2 as usize - offset] = m.amplitude;
            }
            c
        });
        Ok(Self { system, modes, t0, table_len, dense })
    }

    /// Same as [`Superposition::new`] after rescaling the amplitudes to unit norm.
    pub fn normalized(system: System, mut modes: Vec<Mode>, t0: f64) -> Result<Self> {
        let norm: f64 = modes.iter().map(|m| m.amplitude.norm_sqr()).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(invalid("amplitudes have zero or non-finite norm"));
        }
        for m in &mut modes {
            m.amplitude /= norm;
        }
        Self::new(system, modes, t0)
    }

    /// A single eigenstate with unit amplitude.
    pub fn eigenstate(system: System, n1: u32, n2: u32) -> Result<Self> {
        Self::new(system, vec![Mode::new(n1, n2, C64::new(1.0, 0.0))], 0.0)
    }

    /// Equal moduli over the `levels x levels` lowest product states, with
    /// phases drawn uniformly from `[0, 2 pi)` by a generator seeded with `seed`.
    pub fn random_phases(system: System, levels: u32, seed: u64) -> Result<Self> {
        if levels == 0 {
            return Err(invalid("levels must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nmin = system.min_quantum_number();
        let modulus = 1.0 / levels as f64;
        let mut modes = Vec::with_capacity((levels * levels) as usize);
        for n1 in nmin..nmin + levels {
            for n2 in nmin..nmin + levels {
                let theta: f64 = rng.gen_range(0.0..2.0 * PI);
                modes.push(Mode::new(n1, n2, C64::from_polar(modulus, theta)));
            }
        }
        Self::normalized(system, modes, 0.0)
    }

    pub fn system(&self) -> System {
        self.system
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// All modes share one energy and one amplitude phase (mod pi), so `psi` is
    /// a real function times a global phase at every time.
    pub fn is_stationary_real(&self) -> bool {
        let first = &self.modes[0];
        let e0 = self.system.energy(first.n1, first.n2);
        self.modes.iter().all(|m| {
            let z = m.amplitude * first.amplitude.conj();
            self.system.energy(m.n1, m.n2) == e0 && z.im == 0.0
        })
    }

    /// Returns a copy with every amplitude conjugated (the time-reversed state).
    pub fn conjugate(&self) -> Self {
        let mut out = self.clone();
        for m in &mut out.modes {
            m.amplitude = m.amplitude.conj();
        }
        if let Some(c) = &mut out.dense {
            c.iter_mut().for_each(|z| *z = z.conj());
        }
        out
    }

    /// Fills eigenfunction values, first and (optionally) second derivatives along one
    /// axis, each multiplied by the axis time factor `exp(-i E_n (t - t0))`.
    fn axis_table(&self, x: f64, dt: f64, val: &mut [C64], der: &mut [C64], second: Option<&mut [C64]>) {
        let len = val.len();
        let mut stack = [0.0; 2 * STACK];
        let mut heap;
        let scratch: &mut [f64] = if len <= STACK {
            &mut stack[..2 * len]
        } else {
            heap = vec![0.0; 2 * len];
            &mut heap
        };
        let (v, d) = scratch.split_at_mut(len);
        match self.system {
            System::Oscillator { mass, omega } => {
                let s = (mass * omega).sqrt();
                let xi = s * x;
                hermite_functions(xi, v, d);
                let (sv, sd) = (s.sqrt(), s * s.sqrt());
                let step = C64::from_polar(1.0, -omega * dt);
                let mut phase = C64::from_polar(1.0, -0.5 * omega * dt);
                for n in 0..len {
                    val[n] = phase * (sv * v[n]);
                    der[n] = phase * (sd * d[n]);
                    phase *= step;
                }
                if let Some(sec) = second {
                    // h_n'' = (xi^2 - 2n - 1) h_n, times s^2 from the chain rule
                    for n in 0..len {
                        sec[n] = val[n] * (s * s * (xi * xi - 2.0 * n as f64 - 1.0));
                    }
                }
            }
            System::Box => {
                box_modes(x, v, d);
                // exp(-i n^2 dt / 2) by the recurrence on (n+1)^2 - n^2 = 2n + 1
                let mut phase = C64::from_polar(1.0, -0.5 * dt);
                let mut ratio = C64::from_polar(1.0, -1.5 * dt);
                let step = C64::from_polar(1.0, -dt);
                for k in 0..len {
                    val[k] = phase * v[k];
                    der[k] = phase * d[k];
                    phase *= ratio;
                    ratio *= step;
                }
                if let Some(sec) = second {
                    for k in 0..len {
                        let n = (k + 1) as f64;
                        sec[k] = val[k] * (-n * n);
                    }
                }
            }
        }
    }

    fn index(&self, n: u32) -> usize {
        (n - self.system.min_quantum_number()) as usize
    }

    /// `psi(q, t)` and its analytic gradient.
    pub fn eval(&self, q: [f64; 2], t: f64) -> WaveValue {
        let (psi, grad) = self.psi_and_grad(q, t);
        WaveValue::from_parts(psi, grad)
    }

    pub fn psi_and_grad(&self, q: [f64; 2], t: f64) -> (C64, [C64; 2]) {
        let dt = t - self.t0;
        let zero = C64::new(0.0, 0.0);
        let [n1, n2] = self.table_len;
        let (mut sa, mut sb) = ([zero; 3 * STACK], [zero; 3 * STACK]);
        let (mut ha, mut hb) = (Vec::new(), Vec::new());
        let ta = table(&mut sa, &mut ha, 2 * n1);
        let tb = table(&mut sb, &mut hb, 2 * n2);
        let (a, da) = ta.split_at_mut(n1);
        let (b, db) = tb.split_at_mut(n2);
        self.axis_table(q[0], dt, a, da, None);
        self.axis_table(q[1], dt, b, db, None);
        let (mut psi, mut g1, mut g2) = (zero, zero, zero);
        if let Some(c) = &self.dense {
            for (i, row) in c.chunks_exact(n2).enumerate() {
                let (mut s, mut sd) = (zero, zero);
                for ((c, b), db) in row.iter().zip(b.iter()).zip(db.iter()) {
                    s += c * b;
                    sd += c * db;
                }
                psi += a[i] * s;
                g1 += da[i] * s;
                g2 += a[i] * sd;
            }
            return (psi, [g1, g2]);
        }
        for m in &self.modes {
            let (i, j) = (self.index(m.n1), self.index(m.n2));
            let ca = m.amplitude * a[i];
            psi += ca * b[j];
            g2 += ca * db[j];
            g1 += m.amplitude * da[i] * b[j];
        }
        (psi, [g1, g2])
    }

    /// `psi` together with its Laplacian.
    pub fn psi_and_laplacian(&self, q: [f64; 2], t: f64) -> (WaveValue, C64) {
        let dt = t - self.t0;
        let zero = C64::new(0.0, 0.0);
        let [n1, n2] = self.table_len;
        let (mut sa, mut sb) = ([zero; 3 * STACK], [zero; 3 * STACK]);
        let (mut ha, mut hb) = (Vec::new(), Vec::new());
        let ta = table(&mut sa, &mut ha, 3 * n1);
        let tb = table(&mut sb, &mut hb, 3 * n2);
        let (a, rest) = ta.split_at_mut(n1);
        let (da, dda) = rest.split_at_mut(n1);
        let (b, rest) = tb.split_at_mut(n2);
        let (db, ddb) = rest.split_at_mut(n2);
        self.axis_table(q[0], dt, a, da, Some(dda));
        self.axis_table(q[1], dt, b, db, Some(ddb));
        let (mut psi, mut g1, mut g2, mut lap) = (zero, zero, zero, zero);
        for m in &self.modes {
            let (i, j) = (self.index(m.n1), self.index(m.n2));
            let c = m.amplitude;
            psi += c * a[i] * b[j];
            g1 += c * da[i] * b[j];
            g2 += c * a[i] * db[j];
            lap += c * (dda[i] * b[j] + a[i] * ddb[j]);
        }
        (WaveValue::from_parts(psi, [g1, g2]), lap)
    }

    pub fn density(&self, q: [f64; 2], t: f64) -> f64 {
        self.psi_and_grad(q, t).0.norm_sqr()
    }

    /// Energy spread `Delta E` (standard deviation under `|c_n|^2`) and the
    /// quantum timescale `1 / Delta E` (infinite for a single energy).
    pub fn energy_spread(&self) -> (f64, f64) {
        let weights: Vec<(f64, f64)> = self
            .modes
            .iter()
            .map(|m| (m.amplitude.norm_sqr(), self.system.energy(m.n1, m.n2)))
            .collect();
        let total: f64 = weights.iter().map(|w| w.0).sum();
        let mean = weights.iter().map(|(w, e)| w * e).sum::<f64>() / total;
        let var = weights.iter().map(|(w, e)| w * (e - mean).powi(2)).sum::<f64>() / total;
        let spread = var.max(0.0).sqrt();
        let dt = if spread > 0.0 { 1.0 / spread } else { f64::INFINITY };
        (spread, dt)
    }

    /// Bohm's quantum potential `-(1/2m) lap|psi| / |psi|` at `(q, t)`.
    ///
    /// Fails with [`Error::NodeProximity`] when `q` is within the node floor
    /// (see [`crate::guidance::near_node`]).
    pub fn quantum_potential(&self, q: [f64; 2], t: f64, node_floor: f64) -> Result<f64> {
        let (w, lap) = self.psi_and_laplacian(q, t);
        if crate::guidance::near_node(w.psi, &w.grad, node_floor) {
            return Err(Error::NodeProximity { density: w.density });
        }
        let ratio = lap / w.psi;
        let gs = w.phase_grad.expect("nonzero density");
        // lap|psi| / |psi| = Re(lap psi / psi) + |grad S|^2
        let amp_lap = ratio.re + gs[0] * gs[0] + gs[1] * gs[1];
        Ok(-0.5 * amp_lap / self.system.mass())
    }

    /// Serializable description listing every mode explicitly.
    pub fn to_spec(&self) -> SuperpositionSpec {
        let (system, mass, omega) = match self.system {
            System::Oscillator { mass, omega } => (SystemName::Oscillator, mass, omega),
            System::Box => (SystemName::Box, 1.0, 1.0),
        };
        SuperpositionSpec {
            system,
            mass,
            omega,
            t0: self.t0,
            modes: self
                .modes
                .iter()
                .map(|m| [m.n1 as f64, m.n2 as f64, m.amplitude.re, m.amplitude.im])
                .collect(),
            polar: Vec::new(),
            levels: None,
            seed: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemName {
    Oscillator,
    Box,
}

fn one() -> f64 {
    1.0
}

/// TOML/serde form of a superposition.
///
/// Modes come either as explicit `[n1, n2, re, im]` rows, as
/// `[n1, n2, modulus, phase]` rows under `polar`, or are generated from
/// `levels` and `seed` (equal moduli, uniformly random phases).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperpositionSpec {
    pub system: SystemName,
    #[serde(default = "one")]
    pub mass: f64,
    #[serde(default = "one")]
    pub omega: f64,
    #[serde(default)]
    pub t0: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub modes: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub polar: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn quantum_number(x: f64) -> Result<u32> {
    if x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f64 {
        Ok(x as u32)
    } else {
        Err(invalid(format!("quantum number {x} is not a non-negative integer")))
    }
}

impl SuperpositionSpec {
    pub fn build(&self) -> Result<Superposition> {
        let system = match self.system {
            SystemName::Oscillator => System::Oscillator { mass: self.mass, omega: self.omega },
            SystemName::Box => System::Box,
        };
        let explicit = !self.modes.is_empty() || !self.polar.is_empty();
        match (explicit, self.levels) {
            (true, Some(_)) => Err(invalid("give either explicit modes or `levels`, not both")),
            (false, None) => Err(invalid("superposition needs `modes`, `polar` or `levels`")),
            (false, Some(levels)) => {
                let seed = self
                    .seed
                    .ok_or_else(|| invalid("generated phases need an explicit `seed`"))?;
                let s = Superposition::random_phases(system, levels, seed)?;
                Superposition::new(system, s.modes, self.t0)
            }
            (true, None) => {
                let mut modes = Vec::new();
                for row in &self.modes {
                    modes.push(Mode::new(
                        quantum_number(row[0])?,
                        quantum_number(row[1])?,
                        C64::new(row[2], row[3]),
                    ));
                }
                for row in &self.polar {
                    modes.push(Mode::new(
                        quantum_number(row[0])?,
                        quantum_number(row[1])?,
                        C64::from_polar(row[2], row[3]),
                    ));
                }
                Superposition::new(system, modes, self.t0)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn reference() -> Superposition {
        Superposition::random_phases(System::UNIT_OSCILLATOR, 5, 7).unwrap()
    }

    #[test]
    fn ground_state_value_at_origin() {
        let s = Superposition::eigenstate(System::UNIT_OSCILLATOR, 0, 0).unwrap();
        for &t in &[0.0, 1.3, 40.0] {
            let w = s.eval([0.0, 0.0], t);
            assert_relative_eq!(w.psi.norm(), PI.powf(-0.5), max_relative = 1e-14);
        }
    }

    #[test]
    fn box_ground_mode_at_centre() {
        let s = Superposition::eigenstate(System::Box, 1, 1).unwrap();
        let w = s.eval([PI / 2.0, PI / 2.0], 0.3);
        assert_relative_eq!(w.psi.norm(), 2.0 / PI, max_relative = 1e-14);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let s = reference();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        let mut checked = 0;
        for _ in 0..200 {
            let q = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let t = rng.gen_range(0.0..10.0);
            let w = s.eval(q, t);
            let fd = [
                (s.eval([q[0] + h, q[1]], t).psi - s.eval([q[0] - h, q[1]], t).psi) / (2.0 * h),
                (s.eval([q[0], q[1] + h], t).psi - s.eval([q[0], q[1] - h], t).psi) / (2.0 * h),
            ];
            let scale = w.grad[0].norm().max(w.grad[1].norm());
            if scale < 1e-3 {
                continue;
            }
            for k in 0..2 {
                assert!((fd[k] - w.grad[k]).norm() / scale < 1e-6, "q={q:?} t={t}");
            }
            checked += 1;
        }
        assert!(checked > 150);
    }

    #[test]
    fn energy_spread_cases() {
        let s = Superposition::eigenstate(System::UNIT_OSCILLATOR, 2, 1).unwrap();
        let (de, dt) = s.energy_spread();
        assert_eq!(de, 0.0);
        assert!(dt.is_infinite());

        let (de, dt) = reference().energy_spread();
        assert_relative_eq!(de, 2.0, max_relative = 1e-12);
        assert_relative_eq!(dt, 0.5, max_relative = 1e-12);

        let half = C64::new(0.5f64.sqrt(), 0.0);
        let two = Superposition::new(
            System::UNIT_OSCILLATOR,
            vec![Mode::new(0, 0, half), Mode::new(1, 0, half)],
            0.0,
        )
        .unwrap();
        let (de, dt) = two.energy_spread();
        assert_relative_eq!(de, 0.5, max_relative = 1e-14);
        assert_relative_eq!(dt, 2.0, max_relative = 1e-14);
    }

    #[test]
    fn quantum_potential_of_ground_state() {
        let s = Superposition::eigenstate(System::UNIT_OSCILLATOR, 0, 0).unwrap();
        assert_relative_eq!(s.quantum_potential([0.0, 0.0], 0.0, 1e-12).unwrap(), 1.0, epsilon = 1e-13);
        assert!(s.quantum_potential([1.0, 1.0], 2.0, 1e-12).unwrap().abs() < 1e-13);
    }

    #[test]
    fn stationary_states_satisfy_q_plus_v_equals_e() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cases = [
            (System::UNIT_OSCILLATOR, 3, 2),
            (System::Oscillator { mass: 2.0, omega: 0.7 }, 1, 4),
            (System::Box, 2, 3),
        ];
        for (system, n1, n2) in cases {
            let s = Superposition::eigenstate(system, n1, n2).unwrap();
            let e = system.energy(n1, n2);
            let mut done = 0;
            while done < 100 {
                let q = match system {
                    System::Box => [rng.gen_range(0.05..3.1), rng.gen_range(0.05..3.1)],
                    _ => [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)],
                };
                let Ok(qp) = s.quantum_potential(q, rng.gen_range(0.0..5.0), 1e-8) else {
                    continue;
                };
                assert!((qp + system.potential(q) - e).abs() < 1e-9, "{system:?} q={q:?}");
                done += 1;
            }
        }
    }

    #[test]
    fn quantum_potential_rejects_nodes() {
        let s = Superposition::eigenstate(System::UNIT_OSCILLATOR, 1, 0).unwrap();
        let err = s.quantum_potential([0.0, 0.3], 0.0, 1e-12).unwrap_err();
        assert!(matches!(err, Error::NodeProximity { .. }));
    }

    #[test]
    fn density_has_period_two_pi() {
        let s = reference();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let q = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
            let t = rng.gen_range(0.0..30.0);
            let a = s.density(q, t);
            let b = s.density(q, t + 2.0 * PI);
            assert!((a - b).abs() <= 1e-12 * a.max(1e-300) + 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn normalization_over_truncation_box() {
        let s = reference();
        let n = 400;
        let (lo, hi) = (-8.0, 8.0);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let q = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
                total += s.density(q, 1.7) * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn construction_errors() {
        let c = C64::new(1.0, 0.0);
        assert!(Superposition::new(System::Box, vec![Mode::new(0, 1, c)], 0.0).is_err());
        assert!(Superposition::new(
            System::UNIT_OSCILLATOR,
            vec![Mode::new(0, 1, c * 0.5f64.sqrt()), Mode::new(0, 1, c * 0.5f64.sqrt())],
            0.0
        )
        .is_err());
        assert!(Superposition::new(System::UNIT_OSCILLATOR, vec![Mode::new(0, 1, c * 0.9)], 0.0).is_err());
        assert!(Superposition::new(
            System::UNIT_OSCILLATOR,
            vec![Mode::new(0, 1, C64::new(f64::NAN, 0.0))],
            0.0
        )
        .is_err());
    }

    #[test]
    fn toml_spec_forms() {
        let explicit = r#"
            system = "oscillator"
            modes = [[0, 0, 0.6, 0.0], [1, 0, 0.0, 0.8]]
        "#;
        let spec: SuperpositionSpec = toml::from_str(explicit).unwrap();
        let s = spec.build().unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.modes()[1].amplitude, C64::new(0.0, 0.8));

        let generated = r#"
            system = "box"
            levels = 3
            seed = 42
        "#;
        let spec: SuperpositionSpec = toml::from_str(generated).unwrap();
        let s = spec.build().unwrap();
        assert_eq!(s.len(), 9);
        let again: SuperpositionSpec = toml::from_str(&toml::to_string(&s.to_spec()).unwrap()).unwrap();
        assert_eq!(again.build().unwrap(), s);

        let unseeded = "system = \"box\"\nlevels = 2\n";
        let spec: SuperpositionSpec = toml::from_str(unseeded).unwrap();
        assert!(spec.build().is_err());
    }
}
