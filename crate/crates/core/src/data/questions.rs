//! Question programs in five families, their template text, a parser back
//! from text to program, and the answer oracle.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Color, ObjectSpec, Scene, Shape, Size};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Exist,
    Count,
    QueryAttribute,
    CompareAttribute,
    IntegerComparison,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Exist,
        Family::Count,
        Family::QueryAttribute,
        Family::CompareAttribute,
        Family::IntegerComparison,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Exist => "exist",
            Family::Count => "count",
            Family::QueryAttribute => "query_attribute",
            Family::CompareAttribute => "compare_attribute",
            Family::IntegerComparison => "integer_comparison",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Attribute {
    Shape,
    Color,
    Size,
}

impl Attribute {
    const ALL: [Attribute; 3] = [Attribute::Shape, Attribute::Color, Attribute::Size];

    fn word(self) -> &'static str {
        match self {
            Attribute::Shape => "shape",
            Attribute::Color => "color",
            Attribute::Size => "size",
        }
    }

    fn of(self, o: &ObjectSpec) -> &'static str {
        match self {
            Attribute::Shape => o.shape.name(),
            Attribute::Color => o.color.name(),
            Attribute::Size => o.size.name(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Comparison {
    More,
    Fewer,
    Equal,
}

/// Conjunction of optional attribute constraints.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Filter {
    pub size: Option<Size>,
    pub color: Option<Color>,
    pub shape: Option<Shape>,
}

impl Filter {
    pub fn matches(&self, o: &ObjectSpec) -> bool {
        self.size.is_none_or(|s| s == o.size)
            && self.color.is_none_or(|c| c == o.color)
            && self.shape.is_none_or(|s| s == o.shape)
    }

    fn constrains(&self, a: Attribute) -> bool {
        match a {
            Attribute::Shape => self.shape.is_some(),
            Attribute::Color => self.color.is_some(),
            Attribute::Size => self.size.is_some(),
        }
    }

    fn select<'s>(&self, scene: &'s Scene) -> Vec<&'s ObjectSpec> {
        scene.objects.iter().filter(|o| self.matches(o)).collect()
    }

    fn count(&self, scene: &Scene) -> usize {
        scene.objects.iter().filter(|o| self.matches(o)).count()
    }

    fn unique<'s>(&self, scene: &'s Scene) -> Result<&'s ObjectSpec> {
        match self.select(scene).as_slice() {
            [one] => Ok(one),
            many => Err(Error::Data(format!(
                "filter {self:?} matches {} objects, not exactly one",
                many.len()
            ))),
        }
    }

    fn render(&self, plural: bool, out: &mut Vec<&'static str>) {
        out.extend(self.size.map(Size::name));
        out.extend(self.color.map(Color::name));
        out.push(match (self.shape, plural) {
            (Some(s), false) => s.name(),
            (Some(Shape::Cube), true) => "cubes",
            (Some(Shape::Sphere), true) => "spheres",
            (Some(Shape::Cylinder), true) => "cylinders",
            (None, false) => "thing",
            (None, true) => "things",
        });
    }

    /// The filter's explicit (shape, color) combination, if it names both.
    fn named_pair(&self) -> Option<(Shape, Color)> {
        Some((self.shape?, self.color?))
    }
}

/// A functional question program.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Program {
    Exist(Filter),
    Count(Filter),
    Query(Attribute, Filter),
    Compare(Attribute, Filter, Filter),
    IntCompare(Comparison, Filter, Filter),
}

impl Program {
    pub fn family(&self) -> Family {
        match self {
            Program::Exist(_) => Family::Exist,
            Program::Count(_) => Family::Count,
            Program::Query(..) => Family::QueryAttribute,
            Program::Compare(..) => Family::CompareAttribute,
            Program::IntCompare(..) => Family::IntegerComparison,
        }
    }

    pub fn words(&self) -> Vec<&'static str> {
        let mut w = Vec::new();
        match self {
            Program::Exist(f) => {
                w.extend(["is", "there", "a"]);
                f.render(false, &mut w);
            }
            Program::Count(f) => {
                w.extend(["how", "many"]);
                f.render(true, &mut w);
                w.extend(["are", "there"]);
            }
            Program::Query(a, f) => {
                w.extend(["what", a.word(), "is", "the"]);
                f.render(false, &mut w);
            }
            Program::Compare(a, x, y) => {
                w.extend(["does", "the"]);
                x.render(false, &mut w);
                w.extend(["have", "the", "same", a.word(), "as", "the"]);
                y.render(false, &mut w);
            }
            Program::IntCompare(c, x, y) => {
                w.extend(["are", "there"]);
                match c {
                    Comparison::More => w.push("more"),
                    Comparison::Fewer => w.push("fewer"),
                    Comparison::Equal => w.extend(["the", "same", "number", "of"]),
                }
                x.render(true, &mut w);
                w.push(if *c == Comparison::Equal { "and" } else { "than" });
                y.render(true, &mut w);
            }
        }
        w
    }

    pub fn text(&self) -> String {
        self.words().join(" ")
    }

    /// Ground-truth answer on `scene`. Errors when a definite reference
    /// ("the ...") does not pick out exactly one object.
    pub fn answer(&self, scene: &Scene) -> Result<String> {
        let yes_no = |b: bool| if b { "yes" } else { "no" }.to_string();
        Ok(match self {
            Program::Exist(f) => yes_no(f.count(scene) > 0),
            Program::Count(f) => f.count(scene).to_string(),
            Program::Query(a, f) => a.of(f.unique(scene)?).to_string(),
            Program::Compare(a, x, y) => {
                let (ox, oy) = (x.unique(scene)?, y.unique(scene)?);
                if std::ptr::eq(ox, oy) {
                    return Err(Error::Data("both references pick the same object".into()));
                }
                yes_no(a.of(ox) == a.of(oy))
            }
            Program::IntCompare(c, x, y) => {
                let (nx, ny) = (x.count(scene), y.count(scene));
                yes_no(match c {
                    Comparison::More => nx > ny,
                    Comparison::Fewer => nx < ny,
                    Comparison::Equal => nx == ny,
                })
            }
        })
    }

    fn filters(&self) -> Vec<&Filter> {
        match self {
            Program::Exist(f) | Program::Count(f) | Program::Query(_, f) => vec![f],
            Program::Compare(_, x, y) | Program::IntCompare(_, x, y) => vec![x, y],
        }
    }

    /// (shape, color) pairs the question refers to: those of every object a
    /// filter selects, plus any combination a filter names explicitly.
    pub fn referenced_pairs(&self, scene: &Scene) -> BTreeSet<(Shape, Color)> {
        let mut pairs = BTreeSet::new();
        for f in self.filters() {
            pairs.extend(f.named_pair());
            pairs.extend(f.select(scene).iter().map(|o| (o.shape, o.color)));
        }
        pairs
    }
}

/// Recursive-descent parser from template text back to a program.
pub fn parse_question(text: &str) -> Result<Program> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut p = Parser { words: &words, pos: 0 };
    let program = p.program()?;
    if p.pos != words.len() {
        return Err(p.error("trailing words"));
    }
    Ok(program)
}

struct Parser<'a> {
    words: &'a [&'a str],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, what: &str) -> Error {
        Error::Data(format!(
            "cannot parse question at word {} ({what}): {}",
            self.pos,
            self.words.join(" ")
        ))
    }

    fn peek(&self) -> Option<&str> {
        self.words.get(self.pos).copied()
    }

    fn eat(&mut self, word: &str) -> bool {
        if self.peek() == Some(word) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, seq: &[&str]) -> Result<()> {
        for w in seq {
            if !self.eat(w) {
                return Err(self.error(&format!("expected '{w}'")));
            }
        }
        Ok(())
    }

    fn attribute(&mut self) -> Result<Attribute> {
        let a = Attribute::ALL
            .into_iter()
            .find(|a| self.peek() == Some(a.word()))
            .ok_or_else(|| self.error("expected an attribute"))?;
        self.pos += 1;
        Ok(a)
    }

    fn filter(&mut self, plural: bool) -> Result<Filter> {
        let mut f = Filter::default();
        if let Some(s) = self.peek().and_then(Size::parse) {
            f.size = Some(s);
            self.pos += 1;
        }
        if let Some(c) = self.peek().and_then(Color::parse) {
            f.color = Some(c);
            self.pos += 1;
        }
        let noun = self.peek().ok_or_else(|| self.error("expected a noun"))?;
        f.shape = match (noun, plural) {
            ("thing", false) | ("things", true) => None,
            ("cubes", true) => Some(Shape::Cube),
            ("spheres", true) => Some(Shape::Sphere),
            ("cylinders", true) => Some(Shape::Cylinder),
            (w, false) => Some(Shape::parse(w).ok_or_else(|| self.error("expected a noun"))?),
            _ => return Err(self.error("expected a plural noun")),
        };
        self.pos += 1;
        Ok(f)
    }

    fn program(&mut self) -> Result<Program> {
        if self.eat("is") {
            self.expect(&["there", "a"])?;
            Ok(Program::Exist(self.filter(false)?))
        } else if self.eat("how") {
            self.expect(&["many"])?;
            let f = self.filter(true)?;
            self.expect(&["are", "there"])?;
            Ok(Program::Count(f))
        } else if self.eat("what") {
            let a = self.attribute()?;
            self.expect(&["is", "the"])?;
            Ok(Program::Query(a, self.filter(false)?))
        } else if self.eat("does") {
            self.expect(&["the"])?;
            let x = self.filter(false)?;
            self.expect(&["have", "the", "same"])?;
            let a = self.attribute()?;
            self.expect(&["as", "the"])?;
            Ok(Program::Compare(a, x, self.filter(false)?))
        } else if self.eat("are") {
            self.expect(&["there"])?;
            let c = if self.eat("more") {
                Comparison::More
            } else if self.eat("fewer") {
                Comparison::Fewer
            } else {
                self.expect(&["the", "same", "number", "of"])?;
                Comparison::Equal
            };
            let x = self.filter(true)?;
            self.expect(&[if c == Comparison::Equal { "and" } else { "than" }])?;
            Ok(Program::IntCompare(c, x, self.filter(true)?))
        } else {
            Err(self.error("unknown question form"))
        }
    }
}

/// Re-derives the answer of a question from its text alone.
pub fn oracle_answer(question: &str, scene: &Scene) -> Result<String> {
    parse_question(question)?.answer(scene)
}

/// Closed token vocabulary of the templates. Id 0 pads, id 1 is unknown.
pub struct TokenVocab {
    words: Vec<&'static str>,
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;

impl TokenVocab {
    pub fn new() -> Self {
        let mut words = vec!["<pad>", "<unk>"];
        words.extend([
            "is",
            "there",
            "a",
            "how",
            "many",
            "are",
            "what",
            "the",
            "does",
            "have",
            "same",
            "as",
            "more",
            "fewer",
            "than",
            "number",
            "of",
            "and",
            "thing",
            "things",
            "shape",
            "color",
            "size",
            "cubes",
            "spheres",
            "cylinders",
        ]);
        words.extend(Shape::ALL.iter().map(|s| s.name()));
        words.extend(Color::ALL.iter().map(|c| c.name()));
        words.extend(Size::ALL.iter().map(|s| s.name()));
        TokenVocab { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[&'static str] {
        &self.words
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.words.iter().position(|v| *v == w).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.words.get(i).copied().unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl Default for TokenVocab {
    fn default() -> Self {
        Self::new()
    }
}

const MAX_TRIES: usize = 100;

fn random_filter(rng: &mut ChaCha8Rng) -> Filter {
    Filter {
        size: rng.gen_bool(0.4).then(|| *Size::ALL.choose(rng).unwrap()),
        color: rng.gen_bool(0.6).then(|| *Color::ALL.choose(rng).unwrap()),
        shape: rng.gen_bool(0.6).then(|| *Shape::ALL.choose(rng).unwrap()),
    }
}

/// A filter made of a random subset of one object's attributes.
fn filter_from(o: &ObjectSpec, rng: &mut ChaCha8Rng) -> Filter {
    Filter {
        size: rng.gen_bool(0.4).then_some(o.size),
        color: rng.gen_bool(0.6).then_some(o.color),
        shape: rng.gen_bool(0.6).then_some(o.shape),
    }
}

/// Either half the time: a filter seeded from a scene object, or one drawn
/// blind (which often selects nothing).
fn mixed_filter(scene: &Scene, rng: &mut ChaCha8Rng) -> Filter {
    if rng.gen_bool(0.5) {
        filter_from(scene.objects.choose(rng).unwrap(), rng)
    } else {
        random_filter(rng)
    }
}

/// Shortest filter, avoiding attribute `skip`, that picks out object `i`
/// alone; subsets of equal size are tried in random order.
fn unique_filter(scene: &Scene, i: usize, skip: Option<Attribute>, rng: &mut ChaCha8Rng) -> Option<Filter> {
    let o = &scene.objects[i];
    let mut subsets: Vec<u8> = (0u8..8).collect();
    subsets.shuffle(rng);
    subsets.sort_by_key(|m| m.count_ones());
    subsets.into_iter().find_map(|m| {
        let f = Filter {
            size: (m & 1 != 0).then_some(o.size),
            color: (m & 2 != 0).then_some(o.color),
            shape: (m & 4 != 0).then_some(o.shape),
        };
        let ok = skip.is_none_or(|a| !f.constrains(a)) && f.count(scene) == 1;
        ok.then_some(f)
    })
}

fn sample_program(family: Family, scene: &Scene, want_yes: bool, rng: &mut ChaCha8Rng) -> Option<Program> {
    let yes = if want_yes { "yes" } else { "no" };
    for _ in 0..MAX_TRIES {
        let p = match family {
            Family::Exist => {
                let f = if want_yes {
                    filter_from(scene.objects.choose(rng).unwrap(), rng)
                } else {
                    random_filter(rng)
                };
                Program::Exist(f)
            }
            Family::Count => Program::Count(mixed_filter(scene, rng)),
            Family::QueryAttribute => {
                let a = *Attribute::ALL.choose(rng).unwrap();
                let i = rng.gen_range(0..scene.objects.len());
                match unique_filter(scene, i, Some(a), rng) {
                    Some(f) => Program::Query(a, f),
                    None => continue,
                }
            }
            Family::CompareAttribute => {
                if scene.objects.len() < 2 {
                    return None;
                }
                let a = *Attribute::ALL.choose(rng).unwrap();
                let i = rng.gen_range(0..scene.objects.len());
                let j = rng.gen_range(0..scene.objects.len());
                if i == j {
                    continue;
                }
                match (
                    unique_filter(scene, i, Some(a), rng),
                    unique_filter(scene, j, Some(a), rng),
                ) {
                    (Some(x), Some(y)) => Program::Compare(a, x, y),
                    _ => continue,
                }
            }
            Family::IntegerComparison => {
                let c = *[Comparison::More, Comparison::Fewer, Comparison::Equal]
                    .choose(rng)
                    .unwrap();
                let x = mixed_filter(scene, rng);
                let y = mixed_filter(scene, rng);
                if x == y {
                    continue;
                }
                Program::IntCompare(c, x, y)
            }
        };
        let Ok(answer) = p.answer(scene) else { continue };
        let balanced = !matches!(
            family,
            Family::Exist | Family::CompareAttribute | Family::IntegerComparison
        );
        if balanced || answer == yes {
            return Some(p);
        }
    }
    None
}

/// Up to `per_family` programs of each requested family for `scene`. Yes/no
/// families draw their target answer first so both answers are equally
/// likely; a template that cannot be satisfied is resampled and, after
/// repeated failures, skipped.
pub fn generate_questions(
    scene: &Scene,
    families: &[Family],
    per_family: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Program>> {
    if families.is_empty() {
        return Err(Error::Config("no question families requested".into()));
    }
    let mut out = Vec::new();
    for &family in families {
        for _ in 0..per_family {
            let want_yes = rng.gen_bool(0.5);
            if let Some(p) = sample_program(family, scene, want_yes, rng) {
                out.push(p);
            }
        }
    }
    Ok(out)
}
