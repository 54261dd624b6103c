//! Tokens, terms built as token products, and equations as weighted term
//! sums.
//!
//! Equations are kept in right-hand-side form: the target term carries
//! coefficient 1 and every other coefficient `c_j` satisfies
//! `target = sum_j c_j * term_j` on the data. The implicit zero form is
//! `target - sum_j c_j * term_j = 0`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataio::DataSet;
use crate::error::{Error, Result};

/// Atomic building block. Variant order defines the canonical factor order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Token {
    /// `order`-th time derivative of a data field; order 0 is the field.
    Derivative { variable: String, order: usize },
    /// `1 / axis`.
    InverseCoordinate { axis: String },
    Constant,
}

impl Token {
    pub fn field(variable: &str) -> Token {
        Token::Derivative {
            variable: variable.to_string(),
            order: 0,
        }
    }

    pub fn deriv(variable: &str, order: usize) -> Token {
        Token::Derivative {
            variable: variable.to_string(),
            order,
        }
    }

    pub fn inverse(axis: &str) -> Token {
        Token::InverseCoordinate {
            axis: axis.to_string(),
        }
    }

    pub fn derivative_order(&self) -> usize {
        match self {
            Token::Derivative { order, .. } => *order,
            _ => 0,
        }
    }

    /// Whether this is a derivative (order >= 1) of `variable`.
    pub fn is_derivative_of(&self, variable: &str) -> bool {
        matches!(self, Token::Derivative { variable: v, order } if *order >= 1 && v == variable)
    }

    pub fn key(&self) -> String {
        match self {
            Token::Derivative { variable, order: 0 } => variable.clone(),
            Token::Derivative { variable, order } => format!("d{order}_{variable}"),
            Token::InverseCoordinate { axis } => format!("inv_{axis}"),
            Token::Constant => "const".to_string(),
        }
    }

    pub fn parse_key(key: &str) -> Result<Token> {
        if key == "const" {
            return Ok(Token::Constant);
        }
        if let Some(axis) = key.strip_prefix("inv_") {
            return Ok(Token::inverse(axis));
        }
        if let Some(rest) = key.strip_prefix('d') {
            if let Some((digits, var)) = rest.split_once('_') {
                if let Ok(order) = digits.parse::<usize>() {
                    return Ok(Token::deriv(var, order));
                }
            }
        }
        if is_valid_name(key) {
            Ok(Token::field(key))
        } else {
            Err(Error::InvalidEquation(format!("unparseable token key `{key}`")))
        }
    }

    fn display(&self) -> String {
        match self {
            Token::Derivative { variable, order: 0 } => variable.clone(),
            Token::Derivative { variable, order: 1 } => format!("d{variable}/dt"),
            Token::Derivative { variable, order } => format!("d{order}{variable}/dt{order}"),
            Token::InverseCoordinate { axis } => format!("1/{axis}"),
            Token::Constant => "1".to_string(),
        }
    }
}

/// Variable names must be plain identifiers without underscores so that
/// token and node keys stay unambiguous.
pub fn is_valid_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric())
        && !(name.starts_with('d') && name[1..].chars().all(|c| c.is_ascii_digit()) && name.len() > 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    tokens: Vec<Token>,
    pub coefficient: f64,
}

impl Term {
    pub fn new(mut tokens: Vec<Token>, coefficient: f64) -> Term {
        tokens.sort();
        Term {
            tokens,
            coefficient,
        }
    }

    pub fn of(tokens: Vec<Token>) -> Term {
        Term::new(tokens, 1.0)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// Factor-order independent identifier, e.g. `d1_u*v`.
    pub fn key(&self) -> String {
        canonical_key(self)
    }

    pub fn from_key(key: &str, coefficient: f64) -> Result<Term> {
        let tokens = key
            .split('*')
            .map(Token::parse_key)
            .collect::<Result<Vec<_>>>()?;
        Ok(Term::new(tokens, coefficient))
    }

    pub fn max_derivative_order(&self) -> usize {
        self.tokens.iter().map(Token::derivative_order).max().unwrap_or(0)
    }

    pub fn has_derivative(&self) -> bool {
        self.max_derivative_order() >= 1
    }

    pub fn has_derivative_of(&self, variable: &str) -> bool {
        self.tokens.iter().any(|t| t.is_derivative_of(variable))
    }

    /// Power in raw (order 0) fields.
    pub fn field_power(&self) -> usize {
        self.tokens
            .iter()
            .filter(|t| matches!(t, Token::Derivative { order: 0, .. }))
            .count()
    }

    pub fn display(&self) -> String {
        self.tokens
            .iter()
            .map(Token::display)
            .collect::<Vec<_>>()
            .join("*")
    }
}

pub fn canonical_key(term: &Term) -> String {
    // `Term::new` keeps tokens sorted; sort again in case of direct edits.
    let mut keys: Vec<&Token> = term.tokens.iter().collect();
    keys.sort();
    keys.iter().map(|t| t.key()).collect::<Vec<_>>().join("*")
}

pub fn evaluate_token(token: &Token, data: &DataSet) -> Result<Vec<f64>> {
    match token {
        Token::Derivative { variable, order } => data
            .derivative(variable, *order)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| {
                if data.channel(variable).is_none() {
                    Error::MissingChannel(variable.clone())
                } else {
                    Error::MissingDerivative {
                        variable: variable.clone(),
                        order: *order,
                    }
                }
            }),
        Token::InverseCoordinate { axis } => {
            let coord = if axis == data.time_name() {
                data.grid()
            } else {
                data.channel(axis)
                    .ok_or_else(|| Error::MissingChannel(axis.clone()))?
            };
            if let Some(index) = coord.iter().position(|x| *x == 0.0) {
                return Err(Error::Singularity {
                    axis: axis.clone(),
                    index,
                });
            }
            Ok(coord.iter().map(|x| 1.0 / x).collect())
        }
        Token::Constant => Ok(vec![1.0; data.len()]),
    }
}

/// Element-wise product of factor evaluations; the coefficient is not applied.
pub fn evaluate_term(term: &Term, data: &DataSet) -> Result<Vec<f64>> {
    let mut out = vec![1.0; data.len()];
    for token in &term.tokens {
        let v = evaluate_token(token, data)?;
        out.iter_mut().zip(&v).for_each(|(o, x)| *o *= x);
    }
    Ok(out)
}

/// Terms that may serve as the target of an equation for `variable`: they
/// carry a derivative of `variable`, and none of those derivative tokens
/// appears in any other term, so the equation is explicit in the target.
pub fn explicit_targets(terms: &[Term], variable: &str) -> Vec<usize> {
    (0..terms.len())
        .filter(|&i| {
            let own: Vec<&Token> = terms[i]
                .tokens()
                .iter()
                .filter(|t| t.is_derivative_of(variable))
                .collect();
            !own.is_empty()
                && terms
                    .iter()
                    .enumerate()
                    .all(|(j, t)| j == i || own.iter().all(|d| !t.tokens().contains(d)))
        })
        .collect()
}

/// Search-space limits for terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenConfig {
    pub variables: Vec<String>,
    pub axis: String,
    pub max_order: usize,
    pub max_factors: usize,
    pub max_power: usize,
    pub inverse_coordinate: bool,
}

impl TokenConfig {
    pub fn new(variables: Vec<String>, axis: &str, max_order: usize) -> TokenConfig {
        TokenConfig {
            variables,
            axis: axis.to_string(),
            max_order,
            max_factors: 2,
            max_power: 2,
            inverse_coordinate: true,
        }
    }

    /// Builds the configuration for a data set. The inverse coordinate is
    /// dropped when the grid touches zero, and also when it is nearly
    /// constant over the grid (relative spread below 1%, e.g. calendar
    /// years), where it only duplicates the constant token and lets
    /// `du/dt = k * du/dt * (1/t)` pass as an equation.
    pub fn for_data(data: &DataSet, max_order: usize) -> TokenConfig {
        let mut cfg = TokenConfig::new(data.variables().to_vec(), data.time_name(), max_order);
        let grid = data.grid();
        cfg.inverse_coordinate = grid.iter().all(|t| *t != 0.0) && {
            let inv: Vec<f64> = grid.iter().map(|t| 1.0 / t).collect();
            let mean = inv.iter().sum::<f64>() / inv.len() as f64;
            crate::dataio::sample_std(&inv) > 1e-2 * mean.abs()
        };
        cfg
    }

    pub fn universe(&self) -> Vec<Token> {
        let mut out = Vec::new();
        for v in &self.variables {
            for order in 0..=self.max_order {
                out.push(Token::deriv(v, order));
            }
        }
        if self.inverse_coordinate {
            out.push(Token::inverse(&self.axis));
        }
        out.push(Token::Constant);
        out
    }

    pub fn validate_token(&self, token: &Token) -> Result<()> {
        match token {
            Token::Derivative { variable, order } => {
                if !self.variables.contains(variable) {
                    return Err(Error::InvalidEquation(format!("unknown variable `{variable}`")));
                }
                if *order > self.max_order {
                    return Err(Error::InvalidEquation(format!(
                        "derivative order {order} exceeds max_order {}",
                        self.max_order
                    )));
                }
            }
            Token::InverseCoordinate { axis } => {
                if !self.inverse_coordinate || axis != &self.axis {
                    return Err(Error::InvalidEquation(format!("inverse coordinate `{axis}` not allowed")));
                }
            }
            Token::Constant => {}
        }
        Ok(())
    }

    pub fn validate_term(&self, term: &Term) -> Result<()> {
        let n = term.tokens.len();
        if n == 0 || n > self.max_factors {
            return Err(Error::InvalidEquation(format!(
                "term has {n} factors, allowed 1..={}",
                self.max_factors
            )));
        }
        if n > 1 && term.tokens.contains(&Token::Constant) {
            return Err(Error::InvalidEquation("constant token must stand alone".into()));
        }
        if term.field_power() > self.max_power {
            return Err(Error::InvalidEquation(format!(
                "field power {} exceeds max_power {}",
                term.field_power(),
                self.max_power
            )));
        }
        term.tokens.iter().try_for_each(|t| self.validate_token(t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "EquationRepr", try_from = "EquationRepr")]
pub struct Equation {
    terms: Vec<Term>,
    target: usize,
}

/// Serialized form of [`Equation`]: terms by key.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct EquationRepr {
    target: String,
    terms: Vec<KeyCoefficient>,
}

impl From<Equation> for EquationRepr {
    fn from(eq: Equation) -> Self {
        let j = eq.to_json("");
        EquationRepr {
            target: j.target,
            terms: j.terms,
        }
    }
}

impl TryFrom<EquationRepr> for Equation {
    type Error = Error;

    fn try_from(r: EquationRepr) -> Result<Equation> {
        Equation::from_json(&EquationJson {
            variable: String::new(),
            target: r.target,
            terms: r.terms,
            text: String::new(),
        })
    }
}

impl Equation {
    /// Validates the invariants and fixes the target coefficient at 1.
    pub fn new(mut terms: Vec<Term>, target: usize) -> Result<Equation> {
        if target >= terms.len() {
            return Err(Error::InvalidEquation(format!(
                "target index {target} out of range for {} terms",
                terms.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for t in &terms {
            if t.tokens.is_empty() {
                return Err(Error::InvalidEquation("empty term".into()));
            }
            if !seen.insert(t.key()) {
                return Err(Error::InvalidEquation(format!("duplicate term `{}`", t.key())));
            }
        }
        if !terms.iter().any(Term::has_derivative) {
            return Err(Error::InvalidEquation(
                "equation has no derivative term of order >= 1".into(),
            ));
        }
        if !terms[target].has_derivative() {
            return Err(Error::InvalidEquation("target term must contain a derivative".into()));
        }
        terms[target].coefficient = 1.0;
        Ok(Equation { terms, target })
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn target_index(&self) -> usize {
        self.target
    }

    pub fn target(&self) -> &Term {
        &self.terms[self.target]
    }

    /// Number of active terms, target included.
    pub fn complexity(&self) -> usize {
        self.terms.len()
    }

    /// A token that divides every term, if any. Such an equation is the
    /// product of that token with a smaller relation.
    pub fn common_factor(&self) -> Option<&Token> {
        let (first, rest) = self.terms.split_first()?;
        first
            .tokens()
            .iter()
            .find(|tok| rest.iter().all(|t| t.tokens().contains(tok)))
    }

    pub fn keys(&self) -> Vec<String> {
        self.terms.iter().map(Term::key).collect()
    }

    pub fn position(&self, key: &str) -> Option<usize> {
        self.terms.iter().position(|t| t.key() == key)
    }

    pub fn coefficient(&self, key: &str) -> Option<f64> {
        self.position(key).map(|i| self.terms[i].coefficient)
    }

    /// Re-expresses the equation with `index` as the target, dividing
    /// through by its current coefficient.
    pub fn retarget(&self, index: usize) -> Result<Equation> {
        let c = self.terms[index].coefficient;
        if index == self.target {
            return Ok(self.clone());
        }
        if c == 0.0 || !c.is_finite() {
            return Err(Error::InvalidEquation("cannot retarget onto a zero coefficient".into()));
        }
        let terms = self
            .terms
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let coef = if i == self.target {
                    1.0 / c
                } else if i == index {
                    1.0
                } else {
                    -t.coefficient / c
                };
                Term::new(t.tokens.clone(), coef)
            })
            .collect();
        Equation::new(terms, index)
    }

    /// `lhs = c1*term1 + ...`, e.g. `du/dt = 0.55*u - 0.028*u*v`.
    pub fn render(&self) -> String {
        let mut s = format!("{} =", self.target().display());
        let mut first = true;
        for (i, t) in self.terms.iter().enumerate() {
            if i == self.target {
                continue;
            }
            let c = t.coefficient;
            let sign = if c < 0.0 { "-" } else { "+" };
            if first {
                s.push_str(&format!(" {}{}*{}", if c < 0.0 { "-" } else { "" }, fmt_coef(c.abs()), t.display()));
                first = false;
            } else {
                s.push_str(&format!(" {sign} {}*{}", fmt_coef(c.abs()), t.display()));
            }
        }
        if first {
            s.push_str(" 0");
        }
        s
    }

    pub fn to_json(&self, variable: &str) -> EquationJson {
        EquationJson {
            variable: variable.to_string(),
            target: self.target().key(),
            terms: self
                .terms
                .iter()
                .map(|t| KeyCoefficient {
                    key: t.key(),
                    coefficient: t.coefficient,
                })
                .collect(),
            text: self.render(),
        }
    }

    pub fn from_json(json: &EquationJson) -> Result<Equation> {
        let terms = json
            .terms
            .iter()
            .map(|kc| Term::from_key(&kc.key, kc.coefficient))
            .collect::<Result<Vec<_>>>()?;
        let target = terms
            .iter()
            .position(|t| t.key() == json.target)
            .ok_or_else(|| Error::InvalidEquation(format!("target `{}` not among terms", json.target)))?;
        Equation::new(terms, target)
    }
}

impl fmt::Display for Equation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

fn fmt_coef(c: f64) -> String {
    if c != 0.0 && (c.abs() < 1e-3 || c.abs() >= 1e5) {
        format!("{c:.4e}")
    } else {
        let s = format!("{c:.6}");
        let s = s.trim_end_matches('0');
        let s = s.strip_suffix('.').map(|x| format!("{x}.0")).unwrap_or_else(|| s.to_string());
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyCoefficient {
    pub key: String,
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquationJson {
    pub variable: String,
    pub target: String,
    pub terms: Vec<KeyCoefficient>,
    pub text: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{DiffMethod, DiffSettings};

    fn uv_data() -> DataSet {
        DataSet::new(
            "t",
            vec![1.0, 2.0, 4.0],
            vec![("u".into(), vec![1.0, 2.0, 5.0]), ("v".into(), vec![3.0, 4.0, 1.0])],
        )
        .unwrap()
    }

    #[test]
    fn identity_and_inverse_tokens() {
        let d = uv_data();
        assert_eq!(evaluate_token(&Token::field("u"), &d).unwrap(), d.channel("u").unwrap());
        assert_eq!(evaluate_token(&Token::inverse("t"), &d).unwrap(), vec![1.0, 0.5, 0.25]);
        assert_eq!(evaluate_token(&Token::Constant, &d).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn term_product() {
        let d = uv_data();
        let t = Term::of(vec![Token::field("u"), Token::field("v")]);
        assert_eq!(evaluate_term(&t, &d).unwrap(), vec![3.0, 8.0, 5.0]);
        let c = Term::of(vec![Token::Constant]);
        assert_eq!(evaluate_term(&c, &d).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn missing_derivative_and_singularity() {
        let d = uv_data();
        let err = evaluate_token(&Token::deriv("u", 1), &d).unwrap_err();
        assert!(matches!(err, Error::MissingDerivative { ref variable, order: 1 } if variable == "u"));
        let z = DataSet::new("t", vec![0.0, 1.0, 2.0], vec![("u".into(), vec![0.0; 3])]).unwrap();
        assert!(matches!(
            evaluate_token(&Token::inverse("t"), &z),
            Err(Error::Singularity { index: 0, .. })
        ));
    }

    #[test]
    fn derivative_token_matches_dataset() {
        let t: Vec<f64> = (0..50).map(|i| i as f64 * 0.05).collect();
        let u: Vec<f64> = t.iter().map(|x| x.exp()).collect();
        let d = DataSet::new("t", t, vec![("u".into(), u)])
            .unwrap()
            .differentiate(
                "u",
                1,
                &DiffSettings {
                    method: DiffMethod::Central,
                    window: 5,
                    max_order: 1,
                },
            )
            .unwrap();
        assert_eq!(
            evaluate_token(&Token::deriv("u", 1), &d).unwrap(),
            d.derivative("u", 1).unwrap()
        );
    }

    #[test]
    fn keys_are_order_independent() {
        let a = Term::of(vec![Token::field("u"), Token::field("v")]);
        let b = Term::of(vec![Token::field("v"), Token::field("u")]);
        assert_eq!(a.key(), b.key());
        assert_eq!(a.key(), "u*v");
        let dd = Term::of(vec![Token::deriv("u", 1), Token::deriv("v", 1)]);
        let dv = Term::of(vec![Token::deriv("u", 1), Token::field("v")]);
        assert_ne!(dd.key(), dv.key());
        assert_eq!(dv.key(), "d1_u*v");
        assert_eq!(Term::from_key(&dv.key(), 1.0).unwrap(), dv);
    }

    #[test]
    fn first_case_a_system_has_six_distinct_keys() {
        // u-equation of the first case (a) base: u, uv, dv, du*v, du*dv, const, plus target du.
        let keys: BTreeSet<String> = [
            vec![Token::field("u")],
            vec![Token::field("u"), Token::field("v")],
            vec![Token::deriv("v", 1)],
            vec![Token::deriv("u", 1), Token::field("v")],
            vec![Token::deriv("u", 1), Token::deriv("v", 1)],
            vec![Token::Constant],
        ]
        .into_iter()
        .map(|t| Term::of(t).key())
        .collect();
        assert_eq!(keys.len(), 6);
    }

    #[test]
    fn equation_invariants() {
        let du = Term::of(vec![Token::deriv("u", 1)]);
        let u = Term::new(vec![Token::field("u")], 0.5);
        let e = Equation::new(vec![du.clone(), u.clone()], 0).unwrap();
        assert_eq!(e.target().coefficient, 1.0);
        assert_eq!(e.render(), "du/dt = 0.5*u");
        assert!(Equation::new(vec![u.clone(), Term::of(vec![Token::field("v")])], 0).is_err());
        assert!(Equation::new(vec![du.clone(), du.clone()], 0).is_err());
        assert!(Equation::new(vec![du, u], 1).is_err());
    }

    #[test]
    fn retarget_rescales() {
        let du = Term::of(vec![Token::deriv("u", 1)]);
        let duv = Term::of(vec![Token::deriv("u", 1), Token::field("v")]);
        let u = Term::new(vec![Token::field("u")], 3.0);
        // du*v = 2 du + 3 u  =>  du = 0.5 du*v - 1.5 u
        let e = Equation::new(vec![Term::new(du.tokens.clone(), 2.0), duv, u], 1).unwrap();
        let r = e.retarget(0).unwrap();
        assert_eq!(r.coefficient("d1_u"), Some(1.0));
        assert_eq!(r.coefficient("d1_u*v"), Some(0.5));
        assert_eq!(r.coefficient("u"), Some(-1.5));
    }

    #[test]
    fn term_limits() {
        let cfg = TokenConfig::new(vec!["u".into(), "v".into()], "t", 1);
        assert!(cfg.validate_term(&Term::of(vec![Token::field("u"), Token::field("v")])).is_ok());
        assert!(cfg.validate_term(&Term::of(vec![Token::deriv("u", 2)])).is_err());
        assert!(cfg.validate_term(&Term::of(vec![Token::Constant, Token::field("u")])).is_err());
        let mut three = cfg.clone();
        three.max_factors = 3;
        assert!(three
            .validate_term(&Term::of(vec![Token::field("u"); 3]))
            .is_err());
        assert_eq!(cfg.universe().len(), 6);
    }

    #[test]
    fn names() {
        assert!(is_valid_name("u"));
        assert!(is_valid_name("Hare"));
        assert!(!is_valid_name("d1"));
        assert!(!is_valid_name("a_b"));
        assert!(!is_valid_name("1x"));
    }
}
