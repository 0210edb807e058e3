//! Derived flag of a distribution, growth vectors and graded symbol
//! algebras.
//!
//! The flag is generated by iterated brackets of the horizontal frame:
//! level 1 holds the frame fields, level `L+1` adds brackets of all stored
//! word pairs whose lengths sum to `L+1`. Because the flag is a statement
//! about modules of sections, a word can vanish at the base point and still
//! matter (its own brackets need not vanish), so rank stagnation is only
//! declared when it happens at the base point *and* at all axis-perturbed
//! sample points.

use nalgebra::{DMatrix, DVector};

use super::SRStructure;
use crate::{Error, NumericParams, Result};

/// Growth vector, graded basis and graded bracket table of the distribution
/// at a point.
#[derive(Debug, Clone)]
pub struct SymbolProfile {
    /// `growth[L-1] = dim D^{-L}_q` for the computed levels.
    pub growth: Vec<usize>,
    /// Number of levels computed (= `growth.len()`).
    pub depth: usize,
    /// Whether the last computed rank equals the chart dimension.
    pub bracket_generating: bool,
    /// Adapted basis grouped by grade (filled by `symbol_algebra`).
    pub graded_basis: Vec<GradedVector>,
    /// Structure constants of the graded nilpotent algebra, flattened as
    /// `table[(a*n + b)*n + c] = coefficient of basis vector a in [e_b, e_c]`,
    /// nonzero only when `grade(a) = grade(b) + grade(c)`.
    pub bracket_table: Vec<f64>,
    /// Largest bracket component falling into grades deeper than the sum of
    /// the argument grades (violation of the filtration property).
    pub grade_residual: f64,
    /// Defect of the reconstruction of every grade from grade −1 brackets
    /// alone (0 when the symbol algebra is fundamentally graded).
    pub generation_residual: f64,
}

#[derive(Debug, Clone)]
pub struct GradedVector {
    /// Grade as a positive integer: a grade-`L` vector lies in
    /// `D^{-L}_q mod D^{-(L-1)}_q`.
    pub grade: usize,
    /// Chart components of the representative at the base point.
    pub vector: DVector<f64>,
}

impl SymbolProfile {
    pub fn table_entry(&self, a: usize, b: usize, c: usize) -> f64 {
        let n = self.graded_basis.len();
        self.bracket_table[(a * n + b) * n + c]
    }
}

/// Bracket words over the frame, stored as an arena so sub-words are shared.
struct WordArena<'a> {
    s: &'a SRStructure,
    /// `(left, right)` indices, or `None` for frame generators.
    words: Vec<WordNode>,
    level: Vec<usize>,
    fd_step: f64,
}

enum WordNode {
    Frame(usize),
    Bracket(usize, usize),
}

impl<'a> WordArena<'a> {
    fn new(s: &'a SRStructure, fd_step: f64) -> Self {
        let words = (0..s.rank()).map(WordNode::Frame).collect();
        let level = vec![1; s.rank()];
        WordArena {
            s,
            words,
            level,
            fd_step,
        }
    }

    fn value(&self, w: usize, q: &DVector<f64>) -> Result<DVector<f64>> {
        match self.words[w] {
            WordNode::Frame(i) => self.s.frame()[i].eval(q),
            WordNode::Bracket(a, b) => {
                let ja = self.jacobian(a, q)?;
                let jb = self.jacobian(b, q)?;
                let va = self.value(a, q)?;
                let vb = self.value(b, q)?;
                Ok(jb * va - ja * vb)
            }
        }
    }

    /// Jacobian of a word: exact for frame fields, central finite differences
    /// of the value for bracket words.
    fn jacobian(&self, w: usize, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        match self.words[w] {
            WordNode::Frame(i) => Ok(self.s.frame()[i].eval_with_jacobian(q)?.1),
            WordNode::Bracket(_, _) => {
                let n = self.s.dim();
                let h = self.fd_step * (1.0 + q.norm());
                let mut j = DMatrix::zeros(n, n);
                for col in 0..n {
                    let mut qp = q.clone();
                    let mut qm = q.clone();
                    qp[col] += h;
                    qm[col] -= h;
                    let d = (self.value(w, &qp)? - self.value(w, &qm)?) / (2.0 * h);
                    j.set_column(col, &d);
                }
                Ok(j)
            }
        }
    }

    /// Append all new bracket words of the given level (pairs of stored words
    /// with levels summing to it). Returns the index range of the new words.
    fn extend_to_level(&mut self, level: usize) -> std::ops::Range<usize> {
        let start = self.words.len();
        let existing = self.words.len();
        for a in 0..existing {
            for b in (a + 1)..existing {
                if self.level[a] + self.level[b] == level {
                    self.words.push(WordNode::Bracket(a, b));
                    self.level.push(level);
                }
            }
        }
        start..self.words.len()
    }
}

fn rank_of(matrix: &DMatrix<f64>, tol: f64) -> usize {
    if matrix.ncols() == 0 {
        return 0;
    }
    let sv = matrix.clone().svd(false, false).singular_values;
    let max = sv.max();
    if max <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * max).count()
}

fn value_matrix(arena: &WordArena, upto: usize, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = arena.s.dim();
    let mut m = DMatrix::zeros(n, upto);
    for w in 0..upto {
        m.set_column(w, &arena.value(w, q)?);
    }
    Ok(m)
}

fn sample_points(q: &DVector<f64>, radius: f64) -> Vec<DVector<f64>> {
    let mut pts = vec![q.clone()];
    for i in 0..q.len() {
        for sign in [1.0, -1.0] {
            let mut p = q.clone();
            p[i] += sign * radius;
            pts.push(p);
        }
    }
    pts
}

/// Growth vector of the derived flag at `q`, by singular-value rank of the
/// evaluated bracket words. Stops when the rank reaches the chart dimension,
/// when the flag stagnates at the point and at all perturbed sample points,
/// or at `max_depth`.
pub fn growth_vector(
    s: &SRStructure,
    q: &DVector<f64>,
    max_depth: usize,
    tol: f64,
    params: &NumericParams,
) -> Result<SymbolProfile> {
    assert!(max_depth >= 1);
    let n = s.dim();
    let mut arena = WordArena::new(s, params.fd_step);
    let samples = sample_points(q, params.regularity_radius);

    let mut growth = Vec::new();
    let mut rank_at_sample: Vec<usize> = Vec::new();
    for p in &samples {
        rank_at_sample.push(rank_of(&value_matrix(&arena, arena.words.len(), p)?, tol));
    }
    growth.push(rank_at_sample[0]);

    while growth.len() < max_depth && *growth.last().unwrap() < n {
        let level = growth.len() + 1;
        arena.extend_to_level(level);
        let mut new_ranks = Vec::with_capacity(samples.len());
        for p in &samples {
            new_ranks.push(rank_of(&value_matrix(&arena, arena.words.len(), p)?, tol));
        }
        let stagnant = new_ranks
            .iter()
            .zip(&rank_at_sample)
            .all(|(new, old)| new == old);
        if stagnant {
            break;
        }
        growth.push(new_ranks[0]);
        rank_at_sample = new_ranks;
    }

    let depth = growth.len();
    let bracket_generating = *growth.last().unwrap() == n;
    Ok(SymbolProfile {
        growth,
        depth,
        bracket_generating,
        graded_basis: Vec::new(),
        bracket_table: Vec::new(),
        grade_residual: 0.0,
        generation_residual: 0.0,
    })
}

/// Adapted graded basis and graded bracket table of the symbol algebra at a
/// regular point.
pub fn symbol_algebra(
    s: &SRStructure,
    q: &DVector<f64>,
    tol: f64,
    params: &NumericParams,
) -> Result<SymbolProfile> {
    let n = s.dim();
    let mut profile = growth_vector(s, q, n, tol, params)?;

    // Regularity: the growth vector must be locally constant.
    for p in sample_points(q, params.regularity_radius).into_iter().skip(1) {
        let other = growth_vector(s, &p, n, tol, params)?;
        if other.growth != profile.growth {
            return Err(Error::IrregularPoint {
                at_point: profile.growth.clone(),
                at_perturbed: other.growth.clone(),
            });
        }
    }

    // Rebuild the word arena and select, per level, exactly the number of
    // words the growth vector demands, greedily by orthogonal residual.
    let mut arena = WordArena::new(s, params.fd_step);
    let mut selected: Vec<(usize, usize)> = Vec::new(); // (word, grade)
    let mut basis_cols: Vec<DVector<f64>> = Vec::new();
    let mut ortho: Vec<DVector<f64>> = Vec::new();
    let mut scale: f64 = 0.0;

    let select_level = |arena: &WordArena,
                            range: std::ops::Range<usize>,
                            grade: usize,
                            needed: usize,
                            selected: &mut Vec<(usize, usize)>,
                            basis_cols: &mut Vec<DVector<f64>>,
                            ortho: &mut Vec<DVector<f64>>,
                            scale: &mut f64|
     -> Result<()> {
        let mut candidates: Vec<(usize, DVector<f64>)> = Vec::new();
        for w in range {
            candidates.push((w, arena.value(w, q)?));
        }
        for _ in 0..needed {
            // Pick the candidate with the largest residual against the
            // current partial basis; deterministic tie-break by word index.
            let mut best: Option<(usize, DVector<f64>, f64)> = None;
            for (w, v) in &candidates {
                if selected.iter().any(|(sw, _)| sw == w) {
                    continue;
                }
                let mut r = v.clone();
                for o in ortho.iter() {
                    let c = o.dot(&r);
                    r -= o * c;
                }
                let rn = r.norm();
                if best.as_ref().is_none_or(|(_, _, bn)| rn > *bn) {
                    best = Some((*w, v.clone(), rn));
                }
            }
            let (w, v, rn) = best.ok_or_else(|| {
                Error::Config("flag basis selection exhausted candidates".into())
            })?;
            *scale = scale.max(v.norm());
            if rn <= tol * scale.max(1e-300) {
                return Err(Error::Config(
                    "flag basis selection fell below rank tolerance".into(),
                ));
            }
            let mut r = v.clone();
            for o in ortho.iter() {
                let c = o.dot(&r);
                r -= o * c;
            }
            let rnorm = r.norm();
            ortho.push(r / rnorm);
            selected.push((w, grade));
            basis_cols.push(v);
        }
        Ok(())
    };

    select_level(
        &arena,
        0..arena.words.len(),
        1,
        profile.growth[0],
        &mut selected,
        &mut basis_cols,
        &mut ortho,
        &mut scale,
    )?;
    for level in 2..=profile.depth {
        let range = arena.extend_to_level(level);
        let needed = profile.growth[level - 1] - profile.growth[level - 2];
        select_level(
            &arena,
            range,
            level,
            needed,
            &mut selected,
            &mut basis_cols,
            &mut ortho,
            &mut scale,
        )?;
    }

    let dim = selected.len();
    let mut basis_matrix = DMatrix::zeros(n, dim);
    for (col, v) in basis_cols.iter().enumerate() {
        basis_matrix.set_column(col, v);
    }
    // For a bracket-generating regular point dim == n; otherwise solve in the
    // least-squares sense over the spanned subspace.
    let lu = if dim == n {
        Some(basis_matrix.clone().lu())
    } else {
        None
    };
    let decompose = |v: &DVector<f64>| -> Result<DVector<f64>> {
        if let Some(lu) = &lu {
            lu.solve(v).ok_or_else(|| Error::SingularFrame {
                point: q.as_slice().to_vec(),
            })
        } else {
            let svd = basis_matrix.clone().svd(true, true);
            svd.solve(v, 1e-14)
                .map_err(|e| Error::Config(format!("symbol decomposition failed: {e}")))
        }
    };

    // Graded bracket table with filtration residual.
    let mut table = vec![0.0; dim * dim * dim];
    let mut grade_residual: f64 = 0.0;
    let mut table_scale: f64 = 0.0;
    for a in 0..dim {
        for b in (a + 1)..dim {
            let (wa, ga) = selected[a];
            let (wb, gb) = selected[b];
            let target = ga + gb;
            if target > profile.depth {
                continue; // graded bracket lands in a zero component
            }
            // Evaluate [W_a, W_b](q) through a temporary bracket word.
            arena.words.push(WordNode::Bracket(wa, wb));
            arena.level.push(target);
            let v = arena.value(arena.words.len() - 1, q)?;
            arena.words.pop();
            arena.level.pop();
            let coeffs = decompose(&v)?;
            for c in 0..dim {
                let gc = selected[c].1;
                if gc == target {
                    table[(c * dim + a) * dim + b] = coeffs[c];
                    table[(c * dim + b) * dim + a] = -coeffs[c];
                    table_scale = table_scale.max(coeffs[c].abs());
                } else if gc > target {
                    grade_residual = grade_residual.max(coeffs[c].abs());
                }
            }
        }
    }

    // Fundamental gradation: every grade-L block must be spanned by brackets
    // of shallower graded basis vectors, hence inductively by grade −1.
    let mut generation_residual: f64 = 0.0;
    for level in 2..=profile.depth {
        let block: Vec<usize> = (0..dim).filter(|&c| selected[c].1 == level).collect();
        if block.is_empty() {
            continue;
        }
        let mut cols: Vec<DVector<f64>> = Vec::new();
        for a in 0..dim {
            for b in (a + 1)..dim {
                if selected[a].1 + selected[b].1 == level {
                    let mut col = DVector::zeros(block.len());
                    for (row, &c) in block.iter().enumerate() {
                        col[row] = table[(c * dim + a) * dim + b];
                    }
                    cols.push(col);
                }
            }
        }
        // Defect of the unit block vectors against the span of the columns.
        let mut mat = DMatrix::zeros(block.len(), cols.len());
        for (j, c) in cols.iter().enumerate() {
            mat.set_column(j, c);
        }
        let svd = mat.svd(true, false);
        let u = svd.u.as_ref().expect("svd");
        let smax = svd.singular_values.max();
        let spanned: Vec<usize> = svd
            .singular_values
            .iter()
            .enumerate()
            .filter(|(_, &sv)| sv > tol * smax.max(1e-300))
            .map(|(i, _)| i)
            .collect();
        for row in 0..block.len() {
            let mut e = DVector::zeros(block.len());
            e[row] = 1.0;
            let mut r = e.clone();
            for &i in &spanned {
                let ui = u.column(i);
                let c = ui.dot(&r);
                r -= DVector::from_column_slice(ui.as_slice()) * c;
            }
            generation_residual = generation_residual.max(r.norm());
        }
    }

    profile.graded_basis = selected
        .iter()
        .zip(&basis_cols)
        .map(|((_, grade), v)| GradedVector {
            grade: *grade,
            vector: v.clone(),
        })
        .collect();
    profile.bracket_table = table;
    profile.grade_residual = grade_residual;
    profile.generation_residual = generation_residual;
    Ok(profile)
}
