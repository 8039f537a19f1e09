//! Runge-Kutta coefficient tables.
//!
//! Every scheme is stored as a pair of tableaux: `(A, b, c)` for the explicit part
//! and `(Ã, b̃, c̃)` for the implicit part. The explicit baselines (RK4, fixed-step
//! Dopri5) reuse their own tableau for both halves, which makes the IMEX step
//! collapse to a classical explicit RK step on `G + J`.
//!
//! The additive methods are the ARK schemes of Kennedy and Carpenter (orders 3-5)
//! and the two-stage L-stable pair of Pareschi and Russo (order 2). Their
//! coefficients are kept as quotients of the published integers and divided at
//! load time; every numerator and denominator is below 2^53, so the only rounding
//! is the final division.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Identifier of a time-stepping scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SchemeId {
    ImexRk2,
    ImexRk3,
    ImexRk4,
    ImexRk5,
    Erk4,
    Dopri5Fixed,
    CrankNicolson,
}

impl SchemeId {
    pub const ALL: [SchemeId; 7] = [
        SchemeId::ImexRk2,
        SchemeId::ImexRk3,
        SchemeId::ImexRk4,
        SchemeId::ImexRk5,
        SchemeId::Erk4,
        SchemeId::Dopri5Fixed,
        SchemeId::CrankNicolson,
    ];

    pub const IMEX: [SchemeId; 4] = [
        SchemeId::ImexRk2,
        SchemeId::ImexRk3,
        SchemeId::ImexRk4,
        SchemeId::ImexRk5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeId::ImexRk2 => "imex-rk2",
            SchemeId::ImexRk3 => "imex-rk3",
            SchemeId::ImexRk4 => "imex-rk4",
            SchemeId::ImexRk5 => "imex-rk5",
            SchemeId::Erk4 => "erk4",
            SchemeId::Dopri5Fixed => "dopri5",
            SchemeId::CrankNicolson => "crank-nicolson",
        }
    }

    pub fn is_imex(self) -> bool {
        matches!(
            self,
            SchemeId::ImexRk2 | SchemeId::ImexRk3 | SchemeId::ImexRk4 | SchemeId::ImexRk5
        )
    }

    pub fn is_explicit(self) -> bool {
        matches!(self, SchemeId::Erk4 | SchemeId::Dopri5Fixed)
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        let id = match key.as_str() {
            "imex-rk2" | "imexrk2" => SchemeId::ImexRk2,
            "imex-rk3" | "imexrk3" => SchemeId::ImexRk3,
            "imex-rk4" | "imexrk4" => SchemeId::ImexRk4,
            "imex-rk5" | "imexrk5" => SchemeId::ImexRk5,
            "erk4" | "rk4" => SchemeId::Erk4,
            "dopri5" | "dopri5-fixed" => SchemeId::Dopri5Fixed,
            "crank-nicolson" | "cn" => SchemeId::CrankNicolson,
            _ => return Err(Error::UnknownScheme(s.to_string())),
        };
        Ok(id)
    }
}

/// A pair of Butcher tableaux sharing a stage count.
///
/// Matrices are stored row-major, `s * s` entries each.
#[derive(Clone, Debug, PartialEq)]
pub struct ButcherTableauPair {
    stages: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    at: Vec<f64>,
    bt: Vec<f64>,
    ct: Vec<f64>,
    order: u32,
}

impl ButcherTableauPair {
    /// Builds a pair after checking shapes and triangularity.
    ///
    /// `a` must be strictly lower triangular and `at` lower triangular. Consistency
    /// conditions (`Σb = 1`, row sums) are *not* enforced here; use
    /// [`verify_order_conditions`] and [`ButcherTableauPair::check_structure`].
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: Vec<f64>,
        b: Vec<f64>,
        c: Vec<f64>,
        at: Vec<f64>,
        bt: Vec<f64>,
        ct: Vec<f64>,
        order: u32,
    ) -> Result<Self> {
        let s = b.len();
        if s == 0 {
            return Err(Error::InvalidArgument("tableau needs at least one stage".into()));
        }
        for (name, len, want) in [
            ("A", a.len(), s * s),
            ("c", c.len(), s),
            ("Ã", at.len(), s * s),
            ("b̃", bt.len(), s),
            ("c̃", ct.len(), s),
        ] {
            if len != want {
                return Err(Error::InvalidArgument(format!(
                    "tableau {name} has {len} entries, expected {want}"
                )));
            }
        }
        for i in 0..s {
            for j in i..s {
                if a[i * s + j] != 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "explicit A[{i}][{j}] must be zero"
                    )));
                }
                if j > i && at[i * s + j] != 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "implicit Ã[{i}][{j}] must be zero"
                    )));
                }
            }
        }
        Ok(Self {
            stages: s,
            a,
            b,
            c,
            at,
            bt,
            ct,
            order,
        })
    }

    /// An explicit tableau used for both halves of the pair.
    fn explicit(a: Vec<f64>, b: Vec<f64>, c: Vec<f64>, order: u32) -> Result<Self> {
        Self::new(a.clone(), b.clone(), c.clone(), a, b, c, order)
    }

    /// Pairs with abscissae taken as the row sums of the matrices.
    fn with_row_sums(a: Vec<f64>, b: Vec<f64>, at: Vec<f64>, bt: Vec<f64>, order: u32) -> Result<Self> {
        let s = b.len();
        let c = row_sums(&a, s);
        let ct = row_sums(&at, s);
        Self::new(a, b, c, at, bt, ct, order)
    }

    /// Forward Euler on both parts. First-order control for convergence studies.
    pub fn forward_euler() -> Self {
        Self::explicit(vec![0.0], vec![1.0], vec![0.0], 1).expect("valid tableau")
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    /// True when both halves carry the same coefficients, i.e. the pair is a
    /// single explicit method applied to the whole right-hand side.
    pub fn is_fully_explicit(&self) -> bool {
        self.a == self.at && self.b == self.bt
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    #[inline]
    pub fn a(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.stages + j]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.at[i * self.stages + j]
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn bt(&self) -> &[f64] {
        &self.bt
    }

    pub fn ct(&self) -> &[f64] {
        &self.ct
    }

    /// Distinct nonzero diagonal entries of Ã, in stage order.
    pub fn implicit_diagonal(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for i in 0..self.stages {
            let d = self.at(i, i);
            if d != 0.0 && !out.contains(&d) {
                out.push(d);
            }
        }
        out
    }

    /// Checks the structural invariants: row sums match the abscissae, weights sum
    /// to one and, from order 2 on, `Σ b c = 1/2` for both halves.
    pub fn check_structure(&self, tol: f64) -> Result<()> {
        let s = self.stages;
        let fail = |what: String| Err(Error::InvalidArgument(what));
        for i in 0..s {
            let ra: f64 = (0..s).map(|j| self.a(i, j)).sum();
            let rt: f64 = (0..s).map(|j| self.at(i, j)).sum();
            if (ra - self.c[i]).abs() > tol {
                return fail(format!("row {i}: Σ A = {ra}, c = {}", self.c[i]));
            }
            if (rt - self.ct[i]).abs() > tol {
                return fail(format!("row {i}: Σ Ã = {rt}, c̃ = {}", self.ct[i]));
            }
        }
        let sb: f64 = self.b.iter().sum();
        let sbt: f64 = self.bt.iter().sum();
        if (sb - 1.0).abs() > tol || (sbt - 1.0).abs() > tol {
            return fail(format!("weights sum to {sb} and {sbt}"));
        }
        if self.order >= 2 {
            let bc = dot(&self.b, &self.c);
            let btct = dot(&self.bt, &self.ct);
            if (bc - 0.5).abs() > tol || (btct - 0.5).abs() > tol {
                return fail(format!("Σ b c = {bc}, Σ b̃ c̃ = {btct}"));
            }
        }
        Ok(())
    }

    /// Aligned plain-text rendering of both tableaux.
    pub fn to_text(&self) -> String {
        let s = self.stages;
        let mut out = String::new();
        let mut block = |title: &str, m: &dyn Fn(usize, usize) -> f64, c: &[f64], b: &[f64]| {
            let _ = writeln!(out, "{title}");
            for i in 0..s {
                let _ = write!(out, "{:>22.15e} |", c[i]);
                for j in 0..s {
                    let _ = write!(out, " {:>22.15e}", m(i, j));
                }
                out.push('\n');
            }
            let _ = write!(out, "{:>22} |", "");
            for v in b {
                let _ = write!(out, " {v:>22.15e}");
            }
            out.push('\n');
        };
        block("explicit (A | b, c)", &|i, j| self.a(i, j), &self.c, &self.b);
        block("implicit (Ã | b̃, c̃)", &|i, j| self.at(i, j), &self.ct, &self.bt);
        out
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn row_sums(m: &[f64], s: usize) -> Vec<f64> {
    (0..s).map(|i| m[i * s..(i + 1) * s].iter().sum()).collect()
}

#[inline]
fn q(num: i64, den: i64) -> f64 {
    num as f64 / den as f64
}

/// Lower-triangular rows to a dense row-major `s * s` matrix.
fn lower(rows: &[&[f64]]) -> Vec<f64> {
    let s = rows.len();
    let mut m = vec![0.0; s * s];
    for (i, row) in rows.iter().enumerate() {
        m[i * s..i * s + row.len()].copy_from_slice(row);
    }
    m
}

/// Returns the coefficient pair for an RK-type scheme.
///
/// Crank-Nicolson is a Newton-based stepper, not a tableau pair, and yields
/// [`Error::NoTableau`].
pub fn get_tableau(id: SchemeId) -> Result<ButcherTableauPair> {
    match id {
        SchemeId::ImexRk2 => imex_rk2(),
        SchemeId::ImexRk3 => imex_rk3(),
        SchemeId::ImexRk4 => imex_rk4(),
        SchemeId::ImexRk5 => imex_rk5(),
        SchemeId::Erk4 => erk4(),
        SchemeId::Dopri5Fixed => dopri5(),
        SchemeId::CrankNicolson => Err(Error::NoTableau(id.to_string())),
    }
}

fn imex_rk2() -> Result<ButcherTableauPair> {
    let g = 1.0 - 1.0 / 2f64.sqrt();
    let a = lower(&[&[], &[1.0]]);
    let at = lower(&[&[g], &[2.0 / 2f64.sqrt() - 1.0, g]]);
    ButcherTableauPair::new(
        a,
        vec![0.5, 0.5],
        vec![0.0, 1.0],
        at,
        vec![0.5, 0.5],
        vec![g, 1.0 / 2f64.sqrt()],
        2,
    )
}

fn imex_rk3() -> Result<ButcherTableauPair> {
    let g = q(1767732205903, 4055673282236);
    let b = vec![
        q(1471266399579, 7840856788654),
        q(-4482444167858, 7529755066697),
        q(11266239266428, 11593286722821),
        g,
    ];
    let a = lower(&[
        &[],
        &[q(1767732205903, 2027836641118)],
        &[
            q(5535828885825, 10492691773637),
            q(788022342437, 10882634858940),
        ],
        &[
            q(6485989280629, 16251701735622),
            q(-4246266847089, 9704473918619),
            q(10755448449292, 10357097424841),
        ],
    ]);
    let at = lower(&[
        &[0.0],
        &[g, g],
        &[
            q(2746238789719, 10658868560708),
            q(-640167445237, 6845629431997),
            g,
        ],
        &b,
    ]);
    ButcherTableauPair::with_row_sums(a, b.clone(), at, b, 3)
}

fn imex_rk4() -> Result<ButcherTableauPair> {
    let b = vec![
        q(82889, 524892),
        0.0,
        q(15625, 83664),
        q(69875, 102672),
        q(-2260, 8211),
        0.25,
    ];
    let a = lower(&[
        &[],
        &[0.5],
        &[q(13861, 62500), q(6889, 62500)],
        &[
            q(-116923316275, 2393684061468),
            q(-2731218467317, 15368042101831),
            q(9408046702089, 11113171139209),
        ],
        &[
            q(-451086348788, 2902428689909),
            q(-2682348792572, 7519795681897),
            q(12662868775082, 11960479115383),
            q(3355817975965, 11060851509271),
        ],
        &[
            q(647845179188, 3216320057751),
            q(73281519250, 8382639484533),
            q(552539513391, 3454668386233),
            q(3354512671639, 8306763924573),
            q(4040, 17871),
        ],
    ]);
    let at = lower(&[
        &[0.0],
        &[0.25, 0.25],
        &[q(8611, 62500), q(-1743, 31250), 0.25],
        &[
            q(5012029, 34652500),
            q(-654441, 2922500),
            q(174375, 388108),
            0.25,
        ],
        &[
            q(15267082809, 155376265600),
            q(-71443401, 120774400),
            q(730878875, 902184768),
            q(2285395, 8070912),
            0.25,
        ],
        &b,
    ]);
    ButcherTableauPair::with_row_sums(a, b.clone(), at, b, 4)
}

fn imex_rk5() -> Result<ButcherTableauPair> {
    let g = q(41, 200);
    let b = vec![
        q(-872700587467, 9133579230613),
        0.0,
        0.0,
        q(22348218063261, 9555858737531),
        q(-1143369518992, 8141816002931),
        q(-39379526789629, 19018526304540),
        q(32727382324388, 42900044865799),
        g,
    ];
    let a = lower(&[
        &[],
        &[q(41, 100)],
        &[
            q(367902744464, 2072280473677),
            q(677623207551, 8224143866563),
        ],
        &[
            q(1268023523408, 10340822734521),
            0.0,
            q(1029933939417, 13636558850479),
        ],
        &[
            q(14463281900351, 6315353703477),
            0.0,
            q(66114435211212, 5879490589093),
            q(-54053170152839, 4284798021562),
        ],
        &[
            q(14090043504691, 34967701212078),
            0.0,
            q(15191511035443, 11219624916014),
            q(-18461159152457, 12425892160975),
            q(-281667163811, 9011619295870),
        ],
        &[
            q(19230459214898, 13134317526959),
            0.0,
            q(21275331358303, 2942455364971),
            q(-38145345988419, 4862620318723),
            -0.125,
            -0.125,
        ],
        &[
            q(-19977161125411, 11928030595625),
            0.0,
            q(-40795976796054, 6384907823539),
            q(177454434618887, 12078138498510),
            q(782672205425, 8267701900261),
            q(-69563011059811, 9646580694205),
            q(7356628210526, 4942186776405),
        ],
    ]);
    let at = lower(&[
        &[0.0],
        &[g, g],
        &[q(41, 400), q(-567603406766, 11931857230679), g],
        &[
            q(683785636431, 9252920307686),
            0.0,
            q(-110385047103, 1367015193373),
            g,
        ],
        &[
            q(3016520224154, 10081342136671),
            0.0,
            q(30586259806659, 12414158314087),
            q(-22760509404356, 11113319521817),
            g,
        ],
        &[
            q(218866479029, 1489978393911),
            0.0,
            q(638256894668, 5436446318841),
            q(-1179710474555, 5321154724896),
            q(-60928119172, 8023461067671),
            g,
        ],
        &[
            q(1020004230633, 5715676835656),
            0.0,
            q(25762820946817, 25263940353407),
            q(-2161375909145, 9755907335909),
            q(-211217309593, 5846859502534),
            q(-4269925059573, 7827059040749),
            g,
        ],
        &b,
    ]);
    ButcherTableauPair::with_row_sums(a, b.clone(), at, b, 5)
}

fn erk4() -> Result<ButcherTableauPair> {
    let a = lower(&[&[], &[0.5], &[0.0, 0.5], &[0.0, 0.0, 1.0]]);
    ButcherTableauPair::explicit(
        a,
        vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
        vec![0.0, 0.5, 0.5, 1.0],
        4,
    )
}

/// Classical Dormand-Prince 5(4), seven stages, used at a fixed step; the
/// embedded fourth-order weights are not carried.
fn dopri5() -> Result<ButcherTableauPair> {
    let b = vec![
        q(35, 384),
        0.0,
        q(500, 1113),
        q(125, 192),
        q(-2187, 6784),
        q(11, 84),
        0.0,
    ];
    let a = lower(&[
        &[],
        &[q(1, 5)],
        &[q(3, 40), q(9, 40)],
        &[q(44, 45), q(-56, 15), q(32, 9)],
        &[q(19372, 6561), q(-25360, 2187), q(64448, 6561), q(-212, 729)],
        &[
            q(9017, 3168),
            q(-355, 33),
            q(46732, 5247),
            q(49, 176),
            q(-5103, 18656),
        ],
        &b[..6],
    ]);
    let c = vec![0.0, 0.2, 0.3, 0.8, q(8, 9), 1.0, 1.0];
    ButcherTableauPair::explicit(a, b, c, 5)
}

/// One evaluated order condition.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionCheck {
    pub name: String,
    pub order: u32,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionReport {
    pub checks: Vec<ConditionCheck>,
    pub tolerance: f64,
}

impl ConditionReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.residual < self.tolerance)
    }

    pub fn max_residual(&self) -> f64 {
        self.checks.iter().map(|c| c.residual).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.residual < self.tolerance { "ok" } else { "FAIL" };
            let _ = writeln!(
                out,
                "order {}  {:<width$}  residual {:>10.3e}  {status}",
                c.order, c.name, c.residual
            );
        }
        let _ = writeln!(
            out,
            "{} (max residual {:.3e}, tolerance {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_residual(),
            self.tolerance
        );
        out
    }
}

/// Evaluates the classical and coupling order conditions of the additive pair up to
/// order `up_to` (1 to 3).
///
/// A condition passes when its residual is below `1e-10`.
pub fn verify_order_conditions(tab: &ButcherTableauPair, up_to: u32) -> Result<ConditionReport> {
    if !(1..=3).contains(&up_to) {
        return Err(Error::InvalidArgument(format!(
            "order conditions are checked up to order 1, 2 or 3, not {up_to}"
        )));
    }
    let s = tab.stages;
    let mut checks = Vec::new();
    let mut push = |name: String, order: u32, value: f64, target: f64| {
        checks.push(ConditionCheck {
            name,
            order,
            residual: (value - target).abs(),
        });
    };

    let weights: [(&str, &[f64]); 2] = [("b", &tab.b), ("b̃", &tab.bt)];
    let absc: [(&str, &[f64]); 2] = [("c", &tab.c), ("c̃", &tab.ct)];

    for (wn, w) in weights {
        push(format!("Σ {wn} = 1"), 1, w.iter().sum(), 1.0);
    }
    if up_to >= 2 {
        for (wn, w) in weights {
            for (cn, c) in absc {
                push(format!("Σ {wn}·{cn} = 1/2"), 2, dot(w, c), 0.5);
            }
        }
    }
    if up_to >= 3 {
        let mats: [(&str, &dyn Fn(usize, usize) -> f64); 2] =
            [("A", &|i, j| tab.a(i, j)), ("Ã", &|i, j| tab.at(i, j))];
        for (wn, w) in weights {
            for (xi, (xn, x)) in absc.iter().enumerate() {
                for (yn, y) in absc.iter().skip(xi) {
                    let v: f64 = (0..s).map(|i| w[i] * x[i] * y[i]).sum();
                    push(format!("Σ {wn}·{xn}·{yn} = 1/3"), 3, v, 1.0 / 3.0);
                }
            }
            for (mn, m) in mats {
                for (cn, c) in absc {
                    let v: f64 = (0..s)
                        .map(|i| w[i] * (0..s).map(|j| m(i, j) * c[j]).sum::<f64>())
                        .sum();
                    push(format!("Σ {wn}·{mn}·{cn} = 1/6"), 3, v, 1.0 / 6.0);
                }
            }
        }
    }
    Ok(ConditionReport {
        checks,
        tolerance: 1e-10,
    })
}
