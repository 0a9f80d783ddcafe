//! Kernel smoothing over a fixed quadrature grid.
//!
//! The pointwise primitives (`density_estimate`, `regression_estimate`,
//! `mu_n`, `u_n`, ...) are direct O(n) sums and serve as the reference
//! definitions. [`SmoothedDesign`] precomputes, for one dataset and plan, the
//! sparse kernel weights `K_h(z_k - Z_i)` at every grid node together with the
//! floored denominator `f_Zw(z_k)`, which is all the fitting and testing code
//! needs.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::QuadratureRule;
use crate::numeric::pairwise_sum;

/// Lower clamp applied to the denominator density estimate.
pub const DEFAULT_DENSITY_FLOOR: f64 = 1e-4;

/// Observed sample `(Z_i, Y_i)`; `z` is row-major `n x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    z: Vec<f64>,
    y: Vec<f64>,
    d: usize,
}

impl Dataset {
    pub fn new(z: Vec<f64>, y: Vec<f64>, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidInput("dataset dimension must be at least 1".into()));
        }
        if y.is_empty() {
            return Err(Error::InvalidInput("dataset has no observations".into()));
        }
        if z.len() != y.len() * d {
            return Err(Error::InvalidInput(format!(
                "dataset shape mismatch: {} design values for {} responses in dimension {d}",
                z.len(),
                y.len()
            )));
        }
        if let Some(pos) = z.iter().chain(&y).position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("dataset contains a non-finite value at flat position {pos}")));
        }
        Ok(Self { z, y, d })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn z(&self, i: usize) -> &[f64] {
        &self.z[i * self.d..(i + 1) * self.d]
    }

    pub fn z_flat(&self) -> &[f64] {
        &self.z
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Same observations in a different order: row `k` of the result is row `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut z = Vec::with_capacity(self.z.len());
        let mut y = Vec::with_capacity(self.y.len());
        for &i in perm {
            z.extend_from_slice(self.z(i));
            y.push(self.y[i]);
        }
        Self { z, y, d: self.d }
    }

    pub fn with_responses(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(self.z.clone(), y, self.d)
    }

    /// Reads `z1,...,zd,y` CSV with a header row.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let cols = headers.len();
        if cols < 2 {
            return Err(Error::InvalidInput("CSV needs at least the columns z1,y".into()));
        }
        for (j, name) in headers.iter().enumerate() {
            let expected = if j + 1 == cols { "y".to_string() } else { format!("z{}", j + 1) };
            if name != expected {
                return Err(Error::InvalidInput(format!(
                    "CSV header column {} is '{name}', expected '{expected}'",
                    j + 1
                )));
            }
        }
        let d = cols - 1;
        let mut z = Vec::new();
        let mut y = Vec::new();
        for (r, record) in rdr.records().enumerate() {
            let record = record?;
            let row = r + 2; // 1-based, after the header
            if record.len() != cols {
                return Err(Error::InvalidInput(format!("CSV row {row}: expected {cols} fields, found {}", record.len())));
            }
            for (j, field) in record.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    Error::InvalidInput(format!("CSV row {row}, column {} ('{}'): cannot parse '{field}' as a number", j + 1, &headers[j]))
                })?;
                if !v.is_finite() {
                    return Err(Error::InvalidInput(format!("CSV row {row}, column {}: non-finite value", j + 1)));
                }
                if j < d {
                    z.push(v);
                } else {
                    y.push(v);
                }
            }
        }
        Self::new(z, y, d)
    }

    pub fn to_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.d).map(|j| format!("z{j}")).collect();
        header.push("y".into());
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut row: Vec<String> = self.z(i).iter().map(|v| v.to_string()).collect();
            row.push(self.y[i].to_string());
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Epanechnikov,
    Uniform,
}

impl KernelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "epanechnikov" => Ok(Self::Epanechnikov),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::Config(format!("unknown kernel '{other}' (expected epanechnikov or uniform)"))),
        }
    }
}

/// Product kernel on `[-1, 1]^d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    pub kind: KernelKind,
    pub d: usize,
}

impl Kernel {
    pub fn epanechnikov(d: usize) -> Self {
        Self { kind: KernelKind::Epanechnikov, d }
    }

    pub fn uniform(d: usize) -> Self {
        Self { kind: KernelKind::Uniform, d }
    }

    /// One-dimensional profile.
    #[inline]
    pub fn profile(&self, t: f64) -> f64 {
        if t.abs() > 1.0 {
            return 0.0;
        }
        match self.kind {
            KernelKind::Epanechnikov => 0.75 * (1.0 - t * t),
            KernelKind::Uniform => 0.5,
        }
    }

    #[inline]
    pub fn eval(&self, u: &[f64]) -> f64 {
        u.iter().map(|&t| self.profile(t)).product()
    }
}

pub fn kernel_at(k: &Kernel, u: &[f64]) -> f64 {
    k.eval(u)
}

/// `K_h(u) = K(u / h) / h^d`.
pub fn scaled_kernel(k: &Kernel, h: f64, u: &[f64]) -> f64 {
    u.iter().map(|&t| k.profile(t / h) / h).product()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthRule {
    /// `h = a n^{-1/3}`, `w = b (log n / n)^{1/5}`.
    Case1 { a: f64, b: f64 },
    /// `h = n^{-1/4.5}`, `w = n^{-1/6} (log n)^{1/6}`.
    Case2,
    Explicit { h: f64, w: f64 },
}

impl BandwidthRule {
    pub fn resolve(&self, n: usize) -> Result<Bandwidths> {
        let nf = n as f64;
        let (h, w) = match *self {
            BandwidthRule::Case1 { a, b } => (a * nf.powf(-1.0 / 3.0), b * (nf.ln() / nf).powf(0.2)),
            BandwidthRule::Case2 => (nf.powf(-1.0 / 4.5), nf.powf(-1.0 / 6.0) * nf.ln().powf(1.0 / 6.0)),
            BandwidthRule::Explicit { h, w } => (h, w),
        };
        if !(h > 0.0 && w > 0.0 && h.is_finite() && w.is_finite()) {
            return Err(Error::Config(format!("bandwidths must be positive, got h={h}, w={w} (n={n})")));
        }
        Ok(Bandwidths { h, w, rule: *self })
    }

    /// The exponent `a` in `h ~ n^{-a}` implied by the rule.
    pub fn h_exponent(&self, n: usize) -> f64 {
        match *self {
            BandwidthRule::Case1 { .. } => 1.0 / 3.0,
            BandwidthRule::Case2 => 1.0 / 4.5,
            BandwidthRule::Explicit { h, .. } => -h.ln() / (n as f64).ln(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidths {
    pub h: f64,
    pub w: f64,
    pub rule: BandwidthRule,
}

/// Upper limit on the exponent `a` in `h ~ n^{-a}` for dimension `d`.
pub fn h3_upper_exponent(d: usize) -> f64 {
    let df = d as f64;
    (1.0 / (2.0 * df)).min(4.0 / (df * (df + 4.0)))
}

/// Warning text when the numerator bandwidth exponent falls outside
/// `0 < a < min(1/(2d), 4/(d(d+4)))`.
pub fn h3_warning(rule: &BandwidthRule, n: usize, d: usize) -> Option<String> {
    let a = rule.h_exponent(n);
    let upper = h3_upper_exponent(d);
    if a > 0.0 && a < upper {
        None
    } else {
        Some(format!(
            "warning: bandwidth h ~ n^-{a:.4} violates the rate condition 0 < a < {upper:.4} for d={d}; asymptotic results may not apply"
        ))
    }
}

/// The integrating measure `G` on the box `I`, realized by a composite
/// midpoint grid. Weights already include the density `g`.
#[derive(Debug, Clone)]
pub struct GridMeasure {
    region: Vec<(f64, f64)>,
    rule: QuadratureRule,
    weights: Vec<f64>,
    g: Vec<f64>,
}

impl GridMeasure {
    /// Lebesgue measure (`g = 1`) on `region`.
    pub fn lebesgue(region: &[(f64, f64)], counts: &[usize]) -> Result<Self> {
        let rule = QuadratureRule::composite_midpoint(region, counts)?;
        let weights = rule.weights().to_vec();
        let g = vec![1.0; rule.len()];
        Ok(Self { region: region.to_vec(), rule, weights, g })
    }

    /// Default grid: 401 midpoints on `[-1,1]` or 101 per axis on `[-1,1]^2`.
    pub fn default_for(d: usize) -> Result<Self> {
        let count = if d == 1 { 401 } else { 101 };
        Self::lebesgue(&vec![(-1.0, 1.0); d], &vec![count; d])
    }

    /// `dG = g(z) dz` with the given density.
    pub fn with_density<F: Fn(&[f64]) -> f64>(region: &[(f64, f64)], counts: &[usize], g: F) -> Result<Self> {
        let rule = QuadratureRule::composite_midpoint(region, counts)?;
        let gv: Vec<f64> = (0..rule.len()).map(|k| g(rule.node(k))).collect();
        if gv.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput("measure density must be positive on the grid".into()));
        }
        let weights = rule.weights().iter().zip(&gv).map(|(w, g)| w * g).collect();
        Ok(Self { region: region.to_vec(), rule, weights, g: gv })
    }

    /// The measure `c G`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.weights.iter_mut().for_each(|w| *w *= c);
        out.g.iter_mut().for_each(|g| *g *= c);
        out
    }

    /// Same measure with nodes visited in the order `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let d = self.dim();
        let mut nodes = Vec::with_capacity(self.rule.nodes().len());
        let mut w = Vec::with_capacity(perm.len());
        let mut g = Vec::with_capacity(perm.len());
        let mut base_w = Vec::with_capacity(perm.len());
        for &k in perm {
            nodes.extend_from_slice(self.node(k));
            w.push(self.weights[k]);
            g.push(self.g[k]);
            base_w.push(self.rule.weights()[k]);
        }
        let rule = QuadratureRule::new(nodes, base_w, d, self.rule.kind()).expect("permutation of a valid rule");
        Self { region: self.region.clone(), rule, weights: w, g }
    }

    pub fn dim(&self) -> usize {
        self.region.len()
    }

    pub fn region(&self) -> &[(f64, f64)] {
        &self.region
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, k: usize) -> &[f64] {
        self.rule.node(k)
    }

    pub fn nodes_flat(&self) -> &[f64] {
        self.rule.nodes()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn density(&self) -> &[f64] {
        &self.g
    }

    pub fn total_mass(&self) -> f64 {
        pairwise_sum(&self.weights)
    }

    /// `int f dG`.
    pub fn integrate<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> f64 {
        let terms: Vec<f64> = (0..self.len()).map(|k| self.weights[k] * f(self.node(k))).collect();
        pairwise_sum(&terms)
    }
}

/// Everything needed to smooth a dataset on the grid.
#[derive(Debug, Clone)]
pub struct SmoothingPlan {
    /// Numerator kernel `K`.
    pub kernel: Kernel,
    /// Denominator kernel `K*`.
    pub kernel_den: Kernel,
    pub bandwidths: Bandwidths,
    pub grid: GridMeasure,
    pub floor: f64,
}

impl SmoothingPlan {
    pub fn new(kernel: Kernel, kernel_den: Kernel, bandwidths: Bandwidths, grid: GridMeasure, floor: f64) -> Result<Self> {
        if kernel.d != grid.dim() || kernel_den.d != grid.dim() {
            return Err(Error::Config("kernel and grid dimensions differ".into()));
        }
        if !(floor > 0.0) {
            return Err(Error::Config(format!("density floor must be positive, got {floor}")));
        }
        Ok(Self { kernel, kernel_den, bandwidths, grid, floor })
    }

    pub fn d(&self) -> usize {
        self.grid.dim()
    }

    pub fn h(&self) -> f64 {
        self.bandwidths.h
    }

    pub fn w(&self) -> f64 {
        self.bandwidths.w
    }
}

/// Sample-size-free description of a plan; resolved once `n` is known.
#[derive(Debug, Clone)]
pub struct PlanSpec {
    pub kernel: KernelKind,
    pub rule: BandwidthRule,
    pub region: Vec<(f64, f64)>,
    pub grid_counts: Vec<usize>,
    pub floor: f64,
}

impl PlanSpec {
    /// One-dimensional setting on `[-1,1]` with `h = a n^{-1/3}`.
    pub fn case1(a: f64, b: f64) -> Self {
        Self {
            kernel: KernelKind::Epanechnikov,
            rule: BandwidthRule::Case1 { a, b },
            region: vec![(-1.0, 1.0)],
            grid_counts: vec![401],
            floor: DEFAULT_DENSITY_FLOOR,
        }
    }

    /// Two-dimensional setting on `[-1,1]^2` with `h = n^{-1/4.5}`.
    pub fn case2() -> Self {
        Self {
            kernel: KernelKind::Epanechnikov,
            rule: BandwidthRule::Case2,
            region: vec![(-1.0, 1.0); 2],
            grid_counts: vec![101, 101],
            floor: DEFAULT_DENSITY_FLOOR,
        }
    }

    pub fn d(&self) -> usize {
        self.region.len()
    }

    pub fn resolve(&self, n: usize) -> Result<SmoothingPlan> {
        let d = self.d();
        let kernel = Kernel { kind: self.kernel, d };
        let grid = GridMeasure::lebesgue(&self.region, &self.grid_counts)?;
        SmoothingPlan::new(kernel, kernel, self.rule.resolve(n)?, grid, self.floor)
    }
}

/// Observations sorted on the first coordinate for range queries.
struct SortedIndex {
    order: Vec<usize>,
    keys: Vec<f64>,
}

impl SortedIndex {
    fn new(data: &Dataset) -> Self {
        let mut order: Vec<usize> = (0..data.n()).collect();
        order.sort_by(|&a, &b| data.z(a)[0].total_cmp(&data.z(b)[0]).then(a.cmp(&b)));
        let keys = order.iter().map(|&i| data.z(i)[0]).collect();
        Self { order, keys }
    }

    /// Calls `f(i)` for every observation with `|Z_i1 - point_1| <= radius`,
    /// in ascending order of the first coordinate.
    fn for_each_in_slab<F: FnMut(usize)>(&self, center: f64, radius: f64, mut f: F) {
        let lo = self.keys.partition_point(|&k| k < center - radius);
        for (pos, &key) in self.keys.iter().enumerate().skip(lo) {
            if key > center + radius {
                break;
            }
            f(self.order[pos]);
        }
    }
}

/// Sparse kernel weights of one dataset on the grid of one plan.
#[derive(Debug, Clone)]
pub struct SmoothedDesign {
    n: usize,
    h: f64,
    d: usize,
    node_ptr: Vec<usize>,
    obs: Vec<u32>,
    kval: Vec<f64>,
    obs_ptr: Vec<usize>,
    obs_nodes: Vec<u32>,
    obs_kval: Vec<f64>,
    fhat: Vec<f64>,
    psi: Vec<f64>,
    floored: usize,
}

impl SmoothedDesign {
    pub fn new(data: &Dataset, plan: &SmoothingPlan) -> Result<Self> {
        let d = data.d();
        if d != plan.d() {
            return Err(Error::InvalidInput(format!("dataset dimension {d} does not match plan dimension {}", plan.d())));
        }
        let n = data.n();
        let h = plan.h();
        let w = plan.w();
        let index = SortedIndex::new(data);
        let grid = &plan.grid;
        let nodes = grid.len();
        let inv_n = 1.0 / n as f64;

        let mut node_ptr = Vec::with_capacity(nodes + 1);
        node_ptr.push(0);
        let mut obs = Vec::new();
        let mut kval = Vec::new();
        let mut fhat = Vec::with_capacity(nodes);
        let mut psi = Vec::with_capacity(nodes);
        let mut floored = 0;
        let mut u = vec![0.0; d];
        let mut den_terms = Vec::new();
        for k in 0..nodes {
            let zk = grid.node(k);
            index.for_each_in_slab(zk[0], h, |i| {
                let zi = data.z(i);
                for j in 0..d {
                    u[j] = zk[j] - zi[j];
                }
                let v = scaled_kernel(&plan.kernel, h, &u);
                if v > 0.0 {
                    obs.push(i as u32);
                    kval.push(v);
                }
            });
            node_ptr.push(obs.len());

            den_terms.clear();
            index.for_each_in_slab(zk[0], w, |i| {
                let zi = data.z(i);
                for j in 0..d {
                    u[j] = zk[j] - zi[j];
                }
                let v = scaled_kernel(&plan.kernel_den, w, &u);
                if v > 0.0 {
                    den_terms.push(v);
                }
            });
            let f = pairwise_sum(&den_terms) * inv_n;
            let f = if f < plan.floor {
                floored += 1;
                plan.floor
            } else {
                f
            };
            fhat.push(f);
            psi.push(grid.weights()[k] / (f * f));
        }

        // Transpose: for each observation, the nodes it reaches.
        let mut counts = vec![0usize; n + 1];
        for &i in &obs {
            counts[i as usize + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let obs_ptr = counts.clone();
        let mut fill = counts;
        let mut obs_nodes = vec![0u32; obs.len()];
        let mut obs_kval = vec![0.0; obs.len()];
        for k in 0..nodes {
            for p in node_ptr[k]..node_ptr[k + 1] {
                let i = obs[p] as usize;
                obs_nodes[fill[i]] = k as u32;
                obs_kval[fill[i]] = kval[p];
                fill[i] += 1;
            }
        }

        Ok(Self { n, h, d, node_ptr, obs, kval, obs_ptr, obs_nodes, obs_kval, fhat, psi, floored })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn nodes(&self) -> usize {
        self.fhat.len()
    }

    /// Floored `f_Zw` at each grid node.
    pub fn fhat(&self) -> &[f64] {
        &self.fhat
    }

    /// `dG / f_Zw^2` weights at each node.
    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    /// Number of grid nodes where the density estimate hit the floor.
    pub fn floored_nodes(&self) -> usize {
        self.floored
    }

    /// `(obs, K_h(z_k - Z_obs))` pairs contributing at node `k`.
    pub fn node_entries(&self, k: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.node_ptr[k]..self.node_ptr[k + 1];
        self.obs[r.clone()].iter().map(|&i| i as usize).zip(self.kval[r].iter().copied())
    }

    /// `(node, K_h(z_node - Z_i))` pairs for observation `i`.
    pub fn obs_entries(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.obs_ptr[i]..self.obs_ptr[i + 1];
        self.obs_nodes[r.clone()].iter().map(|&k| k as usize).zip(self.obs_kval[r].iter().copied())
    }

    /// `(1/n) sum_i K_h(z_k - Z_i) v_i` at every node.
    pub fn node_sums(&self, values: &[f64]) -> Vec<f64> {
        let inv_n = 1.0 / self.n as f64;
        (0..self.nodes())
            .map(|k| self.node_entries(k).map(|(i, kv)| kv * values[i]).sum::<f64>() * inv_n)
            .collect()
    }

    /// Row-major `nodes x q` smoothing of row-major `n x q` values.
    pub fn node_sums_vec(&self, values: &[f64], q: usize) -> Vec<f64> {
        let inv_n = 1.0 / self.n as f64;
        let mut out = vec![0.0; self.nodes() * q];
        for k in 0..self.nodes() {
            let row = &mut out[k * q..(k + 1) * q];
            for (i, kv) in self.node_entries(k) {
                for (r, v) in row.iter_mut().zip(&values[i * q..(i + 1) * q]) {
                    *r += kv * v;
                }
            }
            row.iter_mut().for_each(|r| *r *= inv_n);
        }
        out
    }

    /// `int v dpsi_hat = sum_k psi_k v_k`.
    pub fn integrate(&self, node_values: &[f64]) -> f64 {
        let terms: Vec<f64> = self.psi.iter().zip(node_values).map(|(p, v)| p * v).collect();
        pairwise_sum(&terms)
    }

    /// `int v^2 dpsi_hat`.
    pub fn integrate_sq(&self, node_values: &[f64]) -> f64 {
        let terms: Vec<f64> = self.psi.iter().zip(node_values).map(|(p, v)| p * v * v).collect();
        pairwise_sum(&terms)
    }

    /// Regression estimate `H_n(z_k)` at every node.
    pub fn regression_on_grid(&self, y: &[f64]) -> Vec<f64> {
        self.node_sums(y).iter().zip(&self.fhat).map(|(s, f)| s / f).collect()
    }
}

/// `f_Zw(z) = (1/n) sum_i K_bw(z - Z_i)`.
pub fn density_estimate(data: &Dataset, k: &Kernel, bw: f64, z: &[f64]) -> f64 {
    let mut u = vec![0.0; data.d()];
    let terms: Vec<f64> = (0..data.n())
        .map(|i| {
            for (j, uj) in u.iter_mut().enumerate() {
                *uj = z[j] - data.z(i)[j];
            }
            scaled_kernel(k, bw, &u)
        })
        .collect();
    pairwise_sum(&terms) / data.n() as f64
}

fn weighted_kernel_sum(data: &Dataset, k: &Kernel, h: f64, z: &[f64], weights: &[f64]) -> f64 {
    let mut u = vec![0.0; data.d()];
    let terms: Vec<f64> = (0..data.n())
        .map(|i| {
            for (j, uj) in u.iter_mut().enumerate() {
                *uj = z[j] - data.z(i)[j];
            }
            scaled_kernel(k, h, &u) * weights[i]
        })
        .collect();
    pairwise_sum(&terms) / data.n() as f64
}

/// `H_n(z) = sum_i K_h(z - Z_i) Y_i / (n max(f_Zw(z), floor))`.
pub fn regression_estimate(data: &Dataset, k_num: &Kernel, h: f64, k_den: &Kernel, w: f64, z: &[f64], floor: f64) -> f64 {
    let num = weighted_kernel_sum(data, k_num, h, z, data.y());
    let den = density_estimate(data, k_den, w, z).max(floor);
    num / den
}

/// `mu_n(z, theta) = (1/n) sum_i K_h(z - Z_i) H_theta(Z_i)`.
pub fn mu_n(data: &Dataset, h_values: &[f64], k: &Kernel, h: f64, z: &[f64]) -> f64 {
    weighted_kernel_sum(data, k, h, z, h_values)
}

/// `mu_dot_n(z, theta)` from row-major `n x q` derivative values.
pub fn mu_dot_n(data: &Dataset, hdot_values: &[f64], q: usize, k: &Kernel, h: f64, z: &[f64]) -> Vec<f64> {
    (0..q)
        .map(|c| {
            let col: Vec<f64> = (0..data.n()).map(|i| hdot_values[i * q + c]).collect();
            weighted_kernel_sum(data, k, h, z, &col)
        })
        .collect()
}

/// `U_n(z, theta) = (1/n) sum_i K_h(z - Z_i) (Y_i - H_theta(Z_i))`.
pub fn u_n(data: &Dataset, h_values: &[f64], k: &Kernel, h: f64, z: &[f64]) -> f64 {
    let resid: Vec<f64> = data.y().iter().zip(h_values).map(|(y, hv)| y - hv).collect();
    weighted_kernel_sum(data, k, h, z, &resid)
}

/// `||K_2||^2 = int (K * K)^2` with outer Gauss-Legendre panels per half-line.
pub fn k2_norm_sq(k: &Kernel) -> f64 {
    k2_norm_sq_with(k, 8)
}

pub fn k2_norm_sq_with(k: &Kernel, panels: usize) -> f64 {
    let one_d = Kernel { kind: k.kind, d: 1 };
    let inner_rule = QuadratureRule::gauss_legendre(12, -1.0, 1.0);
    let conv = |v: f64| -> f64 {
        let lo = (-1.0f64).max(-1.0 - v);
        let hi = (1.0f64).min(1.0 - v);
        if hi <= lo {
            return 0.0;
        }
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        inner_rule.integrate(|t| {
            let u = mid + half * t[0];
            one_d.profile(v + u) * one_d.profile(u)
        }) * half
    };
    let mut total = 0.0;
    let width = 2.0 / panels as f64;
    for p in 0..panels {
        for (lo, hi) in [(-2.0 + p as f64 * width, -2.0 + (p + 1) as f64 * width), (p as f64 * width, (p + 1) as f64 * width)] {
            let rule = QuadratureRule::gauss_legendre(12, lo, hi);
            total += rule.integrate(|v| {
                let c = conv(v[0]);
                c * c
            });
        }
    }
    total.powi(k.d as i32)
}

/// `int (H_n - H)^2 dG` over the plan's grid, the estimator-consistency distance.
pub fn l2_distance_to<F: Fn(&[f64]) -> f64>(design: &SmoothedDesign, plan: &SmoothingPlan, y: &[f64], truth: F) -> f64 {
    let est = design.regression_on_grid(y);
    plan.grid.integrate_indexed(|k, z| {
        let e = est[k] - truth(z);
        e * e
    })
}

impl GridMeasure {
    /// `int f dG` where `f` also receives the node index.
    pub fn integrate_indexed<F: FnMut(usize, &[f64]) -> f64>(&self, mut f: F) -> f64 {
        let terms: Vec<f64> = (0..self.len()).map(|k| self.weights[k] * f(k, self.node(k))).collect();
        pairwise_sum(&terms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn uniform_data(n: usize, seed: u64) -> Dataset {
        let mut s = Stream::new(seed);
        let z: Vec<f64> = (0..n).map(|_| s.uniform_in(-1.0, 1.0)).collect();
        let y: Vec<f64> = z.iter().map(|&zi| zi + s.normal(0.1414)).collect();
        Dataset::new(z, y, 1).unwrap()
    }

    #[test]
    fn kernel_values() {
        let k1 = Kernel::epanechnikov(1);
        assert_eq!(kernel_at(&k1, &[0.0]), 0.75);
        assert_eq!(kernel_at(&k1, &[1.5]), 0.0);
        assert_eq!(kernel_at(&Kernel::epanechnikov(2), &[0.0, 0.0]), 9.0 / 16.0);
        assert_eq!(scaled_kernel(&k1, 0.5, &[0.0]), 1.5);
        assert_eq!(scaled_kernel(&k1, 0.5, &[0.5 * 1.01]), 0.0);
    }

    #[test]
    fn kernels_integrate_to_one() {
        for k in [Kernel::epanechnikov(1), Kernel::uniform(1)] {
            let g = GridMeasure::lebesgue(&[(-1.0, 1.0)], &[20000]).unwrap();
            assert!((g.integrate(|u| k.eval(u)) - 1.0).abs() < 1e-8);
            let gs = GridMeasure::lebesgue(&[(-0.3, 0.3)], &[20000]).unwrap();
            assert!((gs.integrate(|u| scaled_kernel(&k, 0.3, u)) - 1.0).abs() < 1e-8);
        }
        // Gauss-Legendre on the smooth Epanechnikov profile is exact.
        let gl = QuadratureRule::gauss_legendre(4, -1.0, 1.0);
        assert!((gl.integrate(|u| Kernel::epanechnikov(1).eval(u)) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn bandwidth_rules() {
        let b = BandwidthRule::Case1 { a: 0.5, b: 0.5 }.resolve(500).unwrap();
        assert!((b.h - 0.5 * 500f64.powf(-1.0 / 3.0)).abs() < 1e-12);
        assert!((b.w - 0.5 * (500f64.ln() / 500.0).powf(0.2)).abs() < 1e-12);
        let b2 = BandwidthRule::Case2.resolve(300).unwrap();
        assert!((b2.h - 300f64.powf(-1.0 / 4.5)).abs() < 1e-12);
        assert!((b2.w - 300f64.powf(-1.0 / 6.0) * 300f64.ln().powf(1.0 / 6.0)).abs() < 1e-12);
        assert!(BandwidthRule::Explicit { h: 0.0, w: 1.0 }.resolve(10).is_err());
    }

    #[test]
    fn h3_validation() {
        assert!(h3_warning(&BandwidthRule::Case1 { a: 0.5, b: 0.5 }, 500, 1).is_none());
        assert!(h3_warning(&BandwidthRule::Case2, 300, 2).is_none());
        // h = 0.05 at n = 100 implies a = 0.65 > 1/2
        assert!(h3_warning(&BandwidthRule::Explicit { h: 0.05, w: 0.3 }, 100, 1).is_some());
        assert!((h3_upper_exponent(1) - 0.5).abs() < 1e-15);
        assert!((h3_upper_exponent(2) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn grid_mass_and_scaling() {
        let g1 = GridMeasure::default_for(1).unwrap();
        assert!((g1.total_mass() - 2.0).abs() < 2e-10);
        let g2 = GridMeasure::default_for(2).unwrap();
        assert!((g2.total_mass() - 4.0).abs() < 4e-10);
        assert!((g1.scaled(3.0).total_mass() - 6.0).abs() < 1e-10);
        let gd = GridMeasure::with_density(&[(-1.0, 1.0)], &[1000], |z| 0.5 + 0.25 * z[0]).unwrap();
        assert!((gd.total_mass() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn density_estimate_cases() {
        let one = Dataset::new(vec![0.2], vec![1.0], 1).unwrap();
        let k = Kernel::epanechnikov(1);
        assert!((density_estimate(&one, &k, 0.3, &[0.2]) - 0.75 / 0.3).abs() < 1e-15);
        assert_eq!(density_estimate(&one, &k, 0.3, &[0.6]), 0.0);

        let data = uniform_data(500, 9);
        let w = BandwidthRule::Case1 { a: 0.5, b: 0.5 }.resolve(500).unwrap().w;
        let f0 = density_estimate(&data, &k, w, &[0.0]);
        // histogram oracle on the same sample
        let hist = (0..500).filter(|&i| data.z(i)[0].abs() <= w).count() as f64 / (500.0 * 2.0 * w);
        assert!((f0 - 0.5).abs() < 0.1, "f0 = {f0}");
        assert!((hist - 0.5).abs() < 0.1);
    }

    #[test]
    fn density_mass_inside_and_enlarged() {
        let data = uniform_data(200, 4);
        let k = Kernel::epanechnikov(1);
        let h = 0.2;
        let inside = GridMeasure::lebesgue(&[(-1.0, 1.0)], &[4000]).unwrap().integrate(|z| density_estimate(&data, &k, h, z));
        assert!(inside <= 1.0 + 1e-12);
        // Midpoint error on kinks is O(step^2); 1e-6 needs a fine grid.
        let wide = GridMeasure::lebesgue(&[(-1.0 - h, 1.0 + h)], &[24000]).unwrap().integrate(|z| density_estimate(&data, &k, h, z));
        assert!((wide - 1.0).abs() < 1e-6, "{wide}");
    }

    #[test]
    fn regression_estimate_cases() {
        let k = Kernel::epanechnikov(1);
        let data = uniform_data(300, 5);
        let c = data.with_responses(vec![2.5; 300]).unwrap();
        let v = regression_estimate(&c, &k, 0.2, &k, 0.2, &[0.1], 1e-4);
        assert!((v - 2.5).abs() < 1e-13);
        let far = Dataset::new(vec![0.9, 0.95], vec![1.0, 2.0], 1).unwrap();
        assert_eq!(regression_estimate(&far, &k, 0.1, &k, 0.5, &[0.0], 1e-4), 0.0);

        let data = uniform_data(500, 21);
        let bw = BandwidthRule::Case1 { a: 0.5, b: 0.5 }.resolve(500).unwrap();
        let est = regression_estimate(&data, &k, bw.h, &k, bw.w, &[0.3], 1e-4);
        let local: Vec<f64> = (0..500).filter(|&i| (data.z(i)[0] - 0.3).abs() <= bw.h).map(|i| data.y()[i]).collect();
        let local_mean = local.iter().sum::<f64>() / local.len() as f64;
        assert!((est - 0.3).abs() < 0.05, "est {est}");
        assert!((local_mean - 0.3).abs() < 0.05);
    }

    #[test]
    fn mu_and_u_identities() {
        let k = Kernel::epanechnikov(1);
        let data = uniform_data(100, 2);
        let ones = vec![1.0; 100];
        let z = [0.1];
        assert!((mu_n(&data, &ones, &k, 0.2, &z) - density_estimate(&data, &k, 0.2, &z)).abs() < 1e-14);
        let hv: Vec<f64> = (0..100).map(|i| 0.9 * data.z(i)[0]).collect();
        let num = mu_n(&data, data.y(), &k, 0.2, &z);
        assert!((u_n(&data, &hv, &k, 0.2, &z) - (num - mu_n(&data, &hv, &k, 0.2, &z))).abs() < 1e-13);
        let exact = data.with_responses(hv.clone()).unwrap();
        assert!(u_n(&exact, &hv, &k, 0.2, &z).abs() < 1e-15);
        let single = Dataset::new(vec![0.1], vec![0.0], 1).unwrap();
        assert!((mu_n(&single, &[3.0], &k, 0.2, &z) - 3.0 * 0.75 / 0.2).abs() < 1e-14);
        let md = mu_dot_n(&data, data.z_flat(), 1, &k, 0.2, &z);
        assert!((md[0] - mu_n(&data, data.z_flat(), &k, 0.2, &z)).abs() < 1e-15);
    }

    #[test]
    fn k2_norms() {
        // uniform: triangle (2 - |v|)/4 on [-2, 2]
        let u = k2_norm_sq(&Kernel::uniform(1));
        assert!((u - 1.0 / 3.0).abs() < 1e-14);
        let e = k2_norm_sq(&Kernel::epanechnikov(1));
        let e_fine = k2_norm_sq_with(&Kernel::epanechnikov(1), 16);
        assert!((e - e_fine).abs() < 1e-8);
        let e2 = k2_norm_sq(&Kernel::epanechnikov(2));
        assert!((e2 - e * e).abs() < 1e-15);
    }

    #[test]
    fn design_matches_pointwise_primitives() {
        let data = uniform_data(150, 8);
        let plan = PlanSpec::case1(0.5, 0.5).resolve(150).unwrap();
        let design = SmoothedDesign::new(&data, &plan).unwrap();
        let sums = design.node_sums(data.y());
        for k in [0, 37, 200, 400] {
            let z = plan.grid.node(k);
            let direct = mu_n(&data, data.y(), &plan.kernel, plan.h(), z);
            assert!((sums[k] - direct).abs() < 1e-12);
            let f = density_estimate(&data, &plan.kernel_den, plan.w(), z).max(plan.floor);
            assert!((design.fhat()[k] - f).abs() < 1e-12);
        }
        // transpose agrees with forward lists
        let total_fwd: usize = (0..design.nodes()).map(|k| design.node_entries(k).count()).sum();
        let total_bwd: usize = (0..data.n()).map(|i| design.obs_entries(i).count()).sum();
        assert_eq!(total_fwd, total_bwd);
    }

    #[test]
    fn design_2d_matches_pointwise() {
        let mut s = Stream::new(17);
        let n = 120;
        let z: Vec<f64> = (0..2 * n).map(|_| s.uniform_in(-1.0, 1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| s.standard_normal()).collect();
        let data = Dataset::new(z, y, 2).unwrap();
        let mut spec = PlanSpec::case2();
        spec.grid_counts = vec![21, 21];
        let plan = spec.resolve(n).unwrap();
        let design = SmoothedDesign::new(&data, &plan).unwrap();
        let sums = design.node_sums(data.y());
        for k in [0, 100, 220, 440] {
            let zk = plan.grid.node(k);
            assert!((sums[k] - mu_n(&data, data.y(), &plan.kernel, plan.h(), zk)).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let data = uniform_data(10, 3);
        let mut buf = Vec::new();
        data.to_csv(&mut buf).unwrap();
        let back = Dataset::from_csv(buf.as_slice()).unwrap();
        assert_eq!(back, data);

        let bad = "z1,y\n0.1,0.2\n0.3,abc\n";
        let err = Dataset::from_csv(bad.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("column 2"), "{err}");
        let bad_header = "x,y\n0.1,0.2\n";
        assert!(Dataset::from_csv(bad_header.as_bytes()).is_err());
    }
}
