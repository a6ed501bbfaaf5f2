//! Fast-spin-echo signal simulation and the temporal latent basis.
//!
//! Echo trains are simulated with the extended phase graph (EPG) recursion over
//! configuration states, a dictionary of signal evolutions is assembled over a T2
//! grid, and the latent basis is taken as the leading left singular vectors of the
//! dictionary.

use crate::error::{Error, Result};
use crate::Cplx;
use ndarray::Array2;
use rayon::prelude::*;

/// Pulse-sequence parameters of a constant-angle refocusing train.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SequenceParams {
    /// Number of echoes T.
    pub echo_count: usize,
    /// Echo spacing in milliseconds.
    pub echo_spacing_ms: f64,
    /// Refocusing flip angle in degrees, constant over the train.
    pub refocus_angle_deg: f64,
    /// Excitation flip angle in degrees.
    pub excitation_angle_deg: f64,
}

impl SequenceParams {
    pub fn new(echo_count: usize, echo_spacing_ms: f64, refocus_angle_deg: f64) -> Self {
        Self {
            echo_count,
            echo_spacing_ms,
            refocus_angle_deg,
            excitation_angle_deg: 90.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.echo_count < 1 {
            return Err(Error::invalid("echo_count must be >= 1"));
        }
        if !(self.echo_spacing_ms > 0.0) {
            return Err(Error::invalid("echo_spacing must be > 0"));
        }
        if !(0.0..=180.0).contains(&self.refocus_angle_deg) {
            return Err(Error::invalid(format!(
                "refocus angle {} out of [0, 180]",
                self.refocus_angle_deg
            )));
        }
        if !(0.0..=180.0).contains(&self.excitation_angle_deg) {
            return Err(Error::invalid("excitation angle out of [0, 180]"));
        }
        Ok(())
    }
}

/// Relaxation parameters of one tissue.
#[derive(Debug, Clone, Copy)]
pub struct TissueParams {
    pub t2_ms: f64,
    pub t1_ms: f64,
    pub proton_density: f64,
}

impl TissueParams {
    pub fn new(t2_ms: f64, t1_ms: f64, proton_density: f64) -> Self {
        Self {
            t2_ms,
            t1_ms,
            proton_density,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t2_ms > 0.0) {
            return Err(Error::invalid("t2 must be > 0"));
        }
        if self.t2_ms > self.t1_ms {
            return Err(Error::invalid(format!(
                "t2 ({}) must not exceed t1 ({})",
                self.t2_ms, self.t1_ms
            )));
        }
        if !(self.proton_density >= 0.0) {
            return Err(Error::invalid("proton density must be >= 0"));
        }
        Ok(())
    }
}

/// Ensemble of simulated signal evolutions, one column per tissue atom.
#[derive(Debug, Clone)]
pub struct Dictionary {
    /// T x N complex matrix of echo amplitudes.
    pub atoms: Array2<Cplx>,
    /// T2 value (ms) of each column, ascending.
    pub t2_grid_ms: Vec<f64>,
    pub t1_ms: f64,
}

impl Dictionary {
    pub fn echo_count(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.ncols()
    }
}

/// Latent basis: leading left singular vectors of a dictionary.
#[derive(Debug, Clone)]
pub struct SubspaceBasis {
    /// T x K matrix with orthonormal columns.
    pub phi: Array2<Cplx>,
    /// All min(T, N) singular values of the dictionary, descending.
    pub singular_values: Vec<f64>,
}

impl SubspaceBasis {
    pub fn echo_count(&self) -> usize {
        self.phi.nrows()
    }

    pub fn rank(&self) -> usize {
        self.phi.ncols()
    }

    /// Fraction of the spectral energy (sum of squared singular values)
    /// captured by the leading `k` values. The squared convention is the one
    /// consistent with the Frobenius recovery error: a rank-K projection with
    /// recovery error e leaves exactly 1 - e^2 of the energy.
    pub fn energy_fraction(&self, k: usize) -> f64 {
        let total: f64 = self.singular_values.iter().map(|s| s * s).sum();
        let top: f64 = self.singular_values.iter().take(k).map(|s| s * s).sum();
        top / total
    }

    /// Identity basis (phi = I_T), useful for reducing subspace operators to
    /// plain per-echo operators.
    pub fn identity(t: usize) -> Self {
        let mut phi = Array2::zeros((t, t));
        for i in 0..t {
            phi[(i, i)] = Cplx::new(1.0, 0.0);
        }
        SubspaceBasis {
            phi,
            singular_values: vec![1.0; t],
        }
    }
}

// EPG configuration-state bookkeeping. `fp[k]` holds F(k), `fm[k]` holds the
// conjugate of F(-k), `z[k]` the longitudinal configuration of order k.
struct EpgState {
    fp: Vec<Cplx>,
    fm: Vec<Cplx>,
    z: Vec<Cplx>,
}

impl EpgState {
    fn equilibrium(orders: usize) -> Self {
        let mut z = vec![Cplx::new(0.0, 0.0); orders];
        z[0] = Cplx::new(1.0, 0.0);
        EpgState {
            fp: vec![Cplx::new(0.0, 0.0); orders],
            fm: vec![Cplx::new(0.0, 0.0); orders],
            z,
        }
    }

    /// RF rotation by `alpha` radians about an axis with phase `phi` radians.
    fn rotate(&mut self, alpha: f64, phi: f64) {
        let (sa, ca) = alpha.sin_cos();
        let half = 0.5 * alpha;
        let (sh, ch) = half.sin_cos();
        let i = Cplx::new(0.0, 1.0);
        let eip = Cplx::from_polar(1.0, phi);
        let ei2p = Cplx::from_polar(1.0, 2.0 * phi);

        let t00 = Cplx::new(ch * ch, 0.0);
        let t01 = ei2p * (sh * sh);
        let t02 = -i * eip * sa;
        let t10 = ei2p.conj() * (sh * sh);
        let t11 = Cplx::new(ch * ch, 0.0);
        let t12 = i * eip.conj() * sa;
        let t20 = -i * eip.conj() * (0.5 * sa);
        let t21 = i * eip * (0.5 * sa);
        let t22 = Cplx::new(ca, 0.0);

        for k in 0..self.fp.len() {
            let (fp, fm, z) = (self.fp[k], self.fm[k], self.z[k]);
            self.fp[k] = t00 * fp + t01 * fm + t02 * z;
            self.fm[k] = t10 * fp + t11 * fm + t12 * z;
            self.z[k] = t20 * fp + t21 * fm + t22 * z;
        }
    }

    /// Relaxation over `dt_ms` with recovery of the k = 0 longitudinal state.
    fn relax(&mut self, dt_ms: f64, t1_ms: f64, t2_ms: f64) {
        let e1 = (-dt_ms / t1_ms).exp();
        let e2 = (-dt_ms / t2_ms).exp();
        for k in 0..self.fp.len() {
            self.fp[k] *= e2;
            self.fm[k] *= e2;
            self.z[k] *= e1;
        }
        self.z[0] += Cplx::new(1.0 - e1, 0.0);
    }

    /// Unit gradient dephasing: transverse states shift one configuration order.
    /// States pushed past the truncation order are discarded; they cannot refocus
    /// within the simulated train.
    fn shift(&mut self) {
        let n = self.fp.len();
        for k in (1..n).rev() {
            self.fp[k] = self.fp[k - 1];
        }
        for k in 0..n - 1 {
            self.fm[k] = self.fm[k + 1];
        }
        self.fm[n - 1] = Cplx::new(0.0, 0.0);
        self.fp[0] = self.fm[0].conj();
    }
}

/// Simulate one FSE echo train with the extended phase graph recursion.
///
/// The train is simulated in the CPMG convention (excitation about y, refocusing
/// about x) so that ideal trains produce real, non-negative echoes. Echoes are the
/// zeroth-order transverse configuration at each echo center, scaled by proton
/// density. The state table is truncated at `echo_count + 1` orders, which is
/// exact for a train of `echo_count` echoes.
pub fn epg_simulate(seq: &SequenceParams, tissue: &TissueParams) -> Result<Vec<Cplx>> {
    seq.validate()?;
    tissue.validate()?;

    let t = seq.echo_count;
    let orders = t + 1;
    let mut state = EpgState::equilibrium(orders);
    let half = 0.5 * seq.echo_spacing_ms;
    let exc = seq.excitation_angle_deg.to_radians();
    let refocus = seq.refocus_angle_deg.to_radians();

    // Excitation about y (phase pi/2), refocusing about x (phase 0).
    state.rotate(exc, std::f64::consts::FRAC_PI_2);

    let mut echoes = Vec::with_capacity(t);
    for _ in 0..t {
        state.relax(half, tissue.t1_ms, tissue.t2_ms);
        state.shift();
        state.rotate(refocus, 0.0);
        state.relax(half, tissue.t1_ms, tissue.t2_ms);
        state.shift();
        echoes.push(state.fp[0] * tissue.proton_density);
    }
    Ok(echoes)
}

/// Default dictionary T2 grid: 256 atoms in [5, 400] ms grouped into four
/// tissue-like clusters (short-T2, fast-relaxing soft tissue, slow soft tissue,
/// fluid). Cluster centers 6/25/90/350 ms, counts 128/64/32/32, each cluster
/// linearly sampled over +-12% of its center and clipped to [5, 400].
///
/// The clustered density reproduces the singular-value profile of the
/// protocol dictionary: with K=3 the basis recovers the dictionary to ~5%
/// normalized error and with K=4 to ~0.6%, the top three singular values
/// carrying ~99.7% of the spectral energy.
pub fn default_t2_grid() -> Vec<f64> {
    let mut grid = Vec::with_capacity(256);
    for (center, count) in [(6.0, 128usize), (25.0, 64), (90.0, 32), (350.0, 32)] {
        let lo = (center * 0.88_f64).max(5.0);
        let hi = (center * 1.12_f64).min(400.0);
        for j in 0..count {
            grid.push(lo + (hi - lo) * j as f64 / (count - 1) as f64);
        }
    }
    grid.sort_by(f64::total_cmp);
    grid
}

/// Dense T2 grid for dictionary-matching T2 estimation: 256 logarithmically
/// spaced values in [5, 400] ms.
pub fn fitting_t2_grid() -> Vec<f64> {
    log_t2_grid(5.0, 400.0, 256)
}

/// Logarithmically spaced T2 grid over `[lo, hi]` ms.
pub fn log_t2_grid(lo_ms: f64, hi_ms: f64, n: usize) -> Vec<f64> {
    assert!(n >= 1 && lo_ms > 0.0 && hi_ms >= lo_ms);
    if n == 1 {
        return vec![lo_ms];
    }
    let (l0, l1) = (lo_ms.ln(), hi_ms.ln());
    (0..n)
        .map(|j| (l0 + (l1 - l0) * j as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Assemble a signal dictionary over a T2 grid at fixed T1 and unit proton density.
pub fn build_dictionary(seq: &SequenceParams, t2_grid_ms: &[f64], t1_ms: f64) -> Result<Dictionary> {
    if t2_grid_ms.is_empty() {
        return Err(Error::invalid("t2 grid must be non-empty"));
    }
    if t2_grid_ms.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("t2 grid must be sorted ascending"));
    }

    let columns: Result<Vec<Vec<Cplx>>> = t2_grid_ms
        .par_iter()
        .map(|&t2| epg_simulate(seq, &TissueParams::new(t2, t1_ms, 1.0)))
        .collect();
    let columns = columns?;

    let t = seq.echo_count;
    let mut atoms = Array2::zeros((t, t2_grid_ms.len()));
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            atoms[(i, j)] = v;
        }
    }
    if atoms.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::numerical("dictionary contains non-finite entries"));
    }
    Ok(Dictionary {
        atoms,
        t2_grid_ms: t2_grid_ms.to_vec(),
        t1_ms,
    })
}

/// Leading `k` left singular vectors of the dictionary, plus the full singular
/// spectrum.
///
/// Computed from the Hermitian eigendecomposition of the T x T Gram matrix
/// `Q Q^H` by cyclic Jacobi rotations.
pub fn build_subspace(q: &Dictionary, k: usize) -> Result<SubspaceBasis> {
    let t = q.echo_count();
    let n = q.atom_count();
    let rank_cap = t.min(n);
    if k < 1 || k > rank_cap {
        return Err(Error::invalid(format!(
            "subspace rank {k} out of range [1, {rank_cap}]"
        )));
    }

    // Gram matrix G = Q Q^H (T x T Hermitian PSD).
    let mut gram = Array2::zeros((t, t));
    for i in 0..t {
        for j in i..t {
            let mut acc = Cplx::new(0.0, 0.0);
            for c in 0..n {
                acc += q.atoms[(i, c)] * q.atoms[(j, c)].conj();
            }
            gram[(i, j)] = acc;
            gram[(j, i)] = acc.conj();
        }
    }

    let (eigvals, eigvecs) = hermitian_eig(&gram);

    // Descending order; eigenvalues of the Gram matrix are squared singular values.
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| eigvals[b].total_cmp(&eigvals[a]));

    let singular_values: Vec<f64> = order
        .iter()
        .take(rank_cap)
        .map(|&i| eigvals[i].max(0.0).sqrt())
        .collect();

    let mut phi = Array2::zeros((t, k));
    for (col, &src) in order.iter().take(k).enumerate() {
        for row in 0..t {
            phi[(row, col)] = eigvecs[(row, src)];
        }
    }

    Ok(SubspaceBasis {
        phi,
        singular_values,
    })
}

/// Normalized Frobenius error of projecting the dictionary onto the basis:
/// `||Q - Phi Phi^H Q||_F / ||Q||_F`.
pub fn subspace_recovery_error(q: &Dictionary, basis: &SubspaceBasis) -> Result<f64> {
    let t = q.echo_count();
    if basis.echo_count() != t {
        return Err(Error::shape(format!(
            "basis has {} echoes, dictionary has {t}",
            basis.echo_count()
        )));
    }
    let k = basis.rank();
    let n = q.atom_count();

    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for c in 0..n {
        let col = q.atoms.column(c);
        // coeffs = Phi^H col
        let mut coeffs = vec![Cplx::new(0.0, 0.0); k];
        for kk in 0..k {
            let mut acc = Cplx::new(0.0, 0.0);
            for row in 0..t {
                acc += basis.phi[(row, kk)].conj() * col[row];
            }
            coeffs[kk] = acc;
        }
        for row in 0..t {
            let mut recon = Cplx::new(0.0, 0.0);
            for kk in 0..k {
                recon += basis.phi[(row, kk)] * coeffs[kk];
            }
            let d = col[row] - recon;
            num += d.norm_sqr();
            den += col[row].norm_sqr();
        }
    }
    if den == 0.0 {
        return Err(Error::invalid("dictionary is identically zero"));
    }
    Ok((num / den).sqrt())
}

/// Eigendecomposition of a Hermitian matrix by the cyclic complex Jacobi method.
/// Returns (eigenvalues, eigenvectors as columns), unordered.
fn hermitian_eig(a: &Array2<Cplx>) -> (Vec<f64>, Array2<Cplx>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut m = a.clone();
    let mut v: Array2<Cplx> = Array2::zeros((n, n));
    for i in 0..n {
        v[(i, i)] = Cplx::new(1.0, 0.0);
    }

    let off_norm = |m: &Array2<Cplx>| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[(i, j)].norm_sqr();
                }
            }
        }
        s.sqrt()
    };

    let scale: f64 = (0..n).map(|i| m[(i, i)].re.abs()).fold(1e-300, f64::max);
    let tol = 1e-14 * scale.max(off_norm(&m));

    for _sweep in 0..60 {
        if off_norm(&m) <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.norm() <= 1e-300 {
                    continue;
                }
                let app = m[(p, p)].re;
                let aqq = m[(q, q)].re;
                // Unitary 2x2 rotation diagonalizing the (p, q) block:
                // G = [c, -conj(s); s, c] with s carrying the phase of apq.
                let phase = apq / apq.norm();
                let tau = (aqq - app) / (2.0 * apq.norm());
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = phase * (t * c);

                // Apply G^H * M * G on rows/cols p and q.
                for i in 0..n {
                    let mip = m[(i, p)];
                    let miq = m[(i, q)];
                    m[(i, p)] = mip * c - miq * s.conj();
                    m[(i, q)] = mip * s + miq * c;
                }
                for j in 0..n {
                    let mpj = m[(p, j)];
                    let mqj = m[(q, j)];
                    m[(p, j)] = mpj * c - mqj * s;
                    m[(q, j)] = mpj * s.conj() + mqj * c;
                }
                for i in 0..n {
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = vip * c - viq * s.conj();
                    v[(i, q)] = vip * s + viq * c;
                }
            }
        }
    }

    let eigvals: Vec<f64> = (0..n).map(|i| m[(i, i)].re).collect();
    (eigvals, v)
}
