use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};

const BUILTIN: &str = include_str!("../../data/elements.txt");

/// Index of an element in an [`ElementTable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Element(pub u8);

impl Element {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElementInfo {
    pub symbol: String,
    /// Valence electron count.
    pub electrons: u32,
    /// Covalent radius in Å.
    pub radius: f64,
    /// Allowed bond counts, ascending.
    pub valences: Vec<u32>,
}

impl ElementInfo {
    pub fn max_valence(&self) -> u32 {
        *self.valences.last().expect("at least one valence")
    }
}

/// Morse parameters of an element pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairParams {
    /// Well depth.
    pub de: f64,
    /// Width in 1/Å.
    pub a: f64,
    /// Equilibrium distance in Å.
    pub r0: f64,
}

/// Per-element data and a symmetric pair table.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementTable {
    elements: Vec<ElementInfo>,
    /// `n × n`, symmetric; `None` where the file gave no entry.
    pairs: Vec<Option<PairParams>>,
}

fn parse_fields<'a>(
    rest: &'a str,
    source: &str,
    line: usize,
) -> Result<Vec<(&'a str, &'a str)>> {
    rest.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .ok_or_else(|| Error::parse(source, line, format!("expected key=value, got `{kv}`")))
        })
        .collect()
}

fn parse_num<T: std::str::FromStr>(v: &str, key: &str, source: &str, line: usize) -> Result<T> {
    v.parse()
        .map_err(|_| Error::parse(source, line, format!("bad value `{v}` for `{key}`")))
}

impl ElementTable {
    /// Table shipped with the crate.
    pub fn builtin() -> &'static ElementTable {
        static TABLE: OnceLock<ElementTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            ElementTable::parse(BUILTIN, "builtin elements").expect("builtin element table parses")
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ElementTable::parse(&text, &path.display().to_string())
    }

    /// Parse `element S: electrons=.. radius=.. valences=..` and
    /// `pair A B: de=.. a=.. r0=..` lines; `#` starts a comment.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut elements: Vec<ElementInfo> = Vec::new();
        let mut raw_pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (head, rest) = line
                .split_once(':')
                .ok_or_else(|| Error::parse(source, ln, "missing `:`"))?;
            let head: Vec<&str> = head.split_whitespace().collect();
            let fields = parse_fields(rest, source, ln)?;
            let get = |key: &str| {
                fields
                    .iter()
                    .find(|(k, _)| *k == key)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| Error::parse(source, ln, format!("missing `{key}`")))
            };
            match head.as_slice() {
                ["element", sym] => {
                    if elements.iter().any(|e| e.symbol == *sym) {
                        return Err(Error::parse(source, ln, format!("duplicate element `{sym}`")));
                    }
                    let radius: f64 = parse_num(get("radius")?, "radius", source, ln)?;
                    let mut valences = get("valences")?
                        .split(',')
                        .map(|v| parse_num::<u32>(v, "valences", source, ln))
                        .collect::<Result<Vec<_>>>()?;
                    valences.sort_unstable();
                    if !(radius > 0.0) || valences.is_empty() || valences[0] == 0 {
                        return Err(Error::parse(source, ln, "radius and valences must be positive"));
                    }
                    elements.push(ElementInfo {
                        symbol: sym.to_string(),
                        electrons: parse_num(get("electrons")?, "electrons", source, ln)?,
                        radius,
                        valences,
                    });
                }
                ["pair", a, b] => {
                    let p = PairParams {
                        de: parse_num(get("de")?, "de", source, ln)?,
                        a: parse_num(get("a")?, "a", source, ln)?,
                        r0: parse_num(get("r0")?, "r0", source, ln)?,
                    };
                    if !(p.de > 0.0 && p.a > 0.0 && p.r0 > 0.0) {
                        return Err(Error::parse(source, ln, "pair constants must be positive"));
                    }
                    raw_pairs.push((ln, a.to_string(), b.to_string(), p));
                }
                _ => return Err(Error::parse(source, ln, format!("unknown record `{}`", head.join(" ")))),
            }
        }
        if elements.len() > u8::MAX as usize {
            return Err(Error::parse(source, 0, "too many elements"));
        }
        let n = elements.len();
        let mut pairs = vec![None; n * n];
        for (ln, a, b, p) in raw_pairs {
            let find = |s: &str| {
                elements
                    .iter()
                    .position(|e| e.symbol == s)
                    .ok_or_else(|| Error::parse(source, ln, format!("pair names unknown element `{s}`")))
            };
            let (i, j) = (find(&a)?, find(&b)?);
            pairs[i * n + j] = Some(p);
            pairs[j * n + i] = Some(p);
        }
        Ok(ElementTable { elements, pairs })
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn info(&self, e: Element) -> &ElementInfo {
        &self.elements[e.index()]
    }

    pub fn elements(&self) -> impl Iterator<Item = Element> + '_ {
        (0..self.elements.len()).map(|i| Element(i as u8))
    }

    pub fn lookup(&self, symbol: &str) -> Result<Element> {
        self.elements
            .iter()
            .position(|e| e.symbol == symbol)
            .map(|i| Element(i as u8))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown element `{symbol}`")))
    }

    pub fn symbol(&self, e: Element) -> &str {
        &self.elements[e.index()].symbol
    }

    pub fn pair(&self, a: Element, b: Element) -> Result<PairParams> {
        self.pairs[a.index() * self.len() + b.index()].ok_or_else(|| {
            Error::InvalidArgument(format!(
                "no pair parameters for {}-{}",
                self.symbol(a),
                self.symbol(b)
            ))
        })
    }
}
