use super::{finish, unique_examples, Example, SkillDataset, CODE_TAG, CORPUS_TAG, HARD_TAG, MATH_TAG};
use crate::error::Result;
use crate::eval::interp::{eval_program, parse_program, Env};
use crate::rng::Rng;

pub(crate) const NAMES: &[&str] = &[
    "ann", "bob", "cara", "dan", "eve", "finn", "gus", "hana", "ivy", "joe", "kim", "leo", "mia", "ned", "ola", "pam", "raj",
    "sue", "tom", "uma", "vic", "wes", "yan", "zoe",
];
pub(crate) const OBJECTS: &[&str] =
    &["pens", "apples", "cards", "books", "coins", "eggs", "shells", "stamps", "marbles", "cups", "nuts", "beads"];
const IDENTS: &[&str] = &[
    "a", "b", "c", "d", "k", "m", "n", "p", "q", "r", "s", "t", "u", "v", "w", "x", "y", "z", "price", "count", "total", "width",
    "height", "speed", "cost", "rate", "size", "depth",
];

pub const MATH_MAX: u64 = 20;
pub const HARD_MIN: u64 = 1_000;
pub const HARD_MAX: u64 = 1_000_000;
/// Prefix asking for a program, so a hard problem reads as a coding
/// request about a word problem.
pub const HARD_CUE: &str = "write a program that solves: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MathOp {
    Add,
    Sub,
    Mul,
}

impl MathOp {
    const ALL: [MathOp; 3] = [MathOp::Add, MathOp::Sub, MathOp::Mul];

    fn symbol(self) -> char {
        match self {
            MathOp::Add => '+',
            MathOp::Sub => '-',
            MathOp::Mul => '*',
        }
    }

    fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            MathOp::Add => a + b,
            MathOp::Sub => a - b,
            MathOp::Mul => a * b,
        }
    }

    fn render(self, name: &str, obj: &str, a: u64, b: u64) -> String {
        match self {
            MathOp::Add => format!("{name} has {a} {obj} and buys {b} more. how many?"),
            MathOp::Sub => format!("{name} has {a} {obj} and gives away {b}. how many left?"),
            MathOp::Mul => format!("{name} has {a} bags with {b} {obj} each. how many {obj}?"),
        }
    }
}

fn draw_word_problem(rng: &mut Rng, lo: u64, hi: u64) -> (String, MathOp, i64, i64) {
    let op = *rng.choose(&MathOp::ALL);
    let name = rng.choose(NAMES);
    let obj = rng.choose(OBJECTS);
    let mut a = rng.range_inclusive(lo, hi);
    let mut b = rng.range_inclusive(lo, hi);
    if op == MathOp::Sub && b > a {
        std::mem::swap(&mut a, &mut b);
    }
    (op.render(name, obj, a, b), op, a as i64, b as i64)
}

/// Small-operand word problems answered with a worked line and
/// `answer: N`.
pub fn gen_math_skill(n: usize, seed: u64) -> Result<SkillDataset> {
    let examples = unique_examples(n, seed, |rng| {
        let (prompt, op, a, b) = draw_word_problem(rng, 1, MATH_MAX);
        let c = op.apply(a, b);
        Example { prompt, answer: format!("{a}{}{b}={c}\nanswer: {c}", op.symbol()), reference: Some(c) }
    })?;
    finish(MATH_TAG, None, seed, examples)
}

/// The same word problems with operands in `[10³, 10⁶]`, answered by a
/// program whose value is the ground truth.
pub fn gen_hard_compose(n: usize, seed: u64) -> Result<SkillDataset> {
    let examples = unique_examples(n, seed, |rng| {
        let (problem, op, a, b) = draw_word_problem(rng, HARD_MIN, HARD_MAX);
        Example {
            prompt: format!("{HARD_CUE}{problem}"),
            answer: format!("return ({a}{}{b})", op.symbol()),
            reference: Some(op.apply(a, b)),
        }
    })?;
    finish(HARD_TAG, None, seed, examples)
}

fn distinct<'a>(rng: &mut Rng, k: usize) -> Vec<&'a str> {
    let mut pool: Vec<&str> = IDENTS.to_vec();
    rng.shuffle(&mut pool);
    pool.truncate(k);
    pool
}

/// Instruction to `return <expr>` over named operands.
pub fn gen_code_skill(n: usize, seed: u64) -> Result<SkillDataset> {
    let examples = unique_examples(n, seed, |rng| {
        let v = distinct(rng, 3);
        let (x, y, z) = (v[0], v[1], v[2]);
        let (instr, prog) = match rng.below(6) {
            0 => (format!("adds {x} and {y}"), format!("({x}+{y})")),
            1 => (format!("subtracts {y} from {x}"), format!("({x}-{y})")),
            2 => (format!("multiplies {x} and {y}"), format!("({x}*{y})")),
            3 => (format!("adds {x} and {y} then multiplies by {z}"), format!("(({x}+{y})*{z})")),
            4 => (format!("subtracts {y} from {x} then multiplies by {z}"), format!("(({x}-{y})*{z})")),
            _ => (format!("multiplies {x} and {y} then adds {z}"), format!("(({x}*{y})+{z})")),
        };
        Example { prompt: format!("write a program that {instr}."), answer: format!("return {prog}"), reference: None }
    })?;
    finish(CODE_TAG, None, seed, examples)
}

/// Unsupervised text for base pretraining: statements about people,
/// objects, numbers and names that repeat earlier words, so the base
/// learns to copy from context. No questions and no programs. Rows pack
/// several statements up to a random length so every position of the
/// context window sees training signal.
pub fn gen_corpus(n: usize, seed: u64) -> Result<SkillDataset> {
    let examples = unique_examples(n, seed, |rng| {
        let target = 16 + rng.below(CORPUS_ROW_MAX - 15);
        let mut text = corpus_statement(rng);
        loop {
            let next = corpus_statement(rng);
            if text.len() + 1 + next.len() > target {
                break;
            }
            text.push(' ');
            text.push_str(&next);
        }
        Example { prompt: String::new(), answer: text, reference: None }
    })?;
    finish(CORPUS_TAG, None, seed, examples)
}

const CORPUS_ROW_MAX: usize = 120;

fn corpus_statement(rng: &mut Rng) -> String {
    let name = rng.choose(NAMES);
    let other = rng.choose(NAMES);
    let obj = rng.choose(OBJECTS);
    let v = distinct(rng, 2);
    let (x, y) = (v[0], v[1]);
    let magnitude = [9u64, 99, 999, 99_999, 999_999][rng.below(5)];
    let a = rng.range_inclusive(1, magnitude);
    let b = rng.range_inclusive(1, magnitude);
    if rng.below(2) == 0 {
        let (w, u) = (random_word(rng), random_word(rng));
        return format!("{w} {u} ; {w} {u}");
    }
    match rng.below(9) {
        0 => format!("{name} has {a} {obj}. so {name} has {a} {obj}."),
        1 => format!("{name} saw {a} {obj} and {other} saw {b}."),
        2 => format!("{a} {b} {a} {b}"),
        3 => format!("{name} and {other} share the {obj} ({a} and {b})."),
        4 => format!("{x} is {a} and {y} is {b}. {x} is {a}."),
        5 => format!("{name} counts {a}, then {b}, then {a}."),
        6 => format!("({x} {y}) ({x} {y}) ({b})"),
        7 => format!("{name} met {other}. then {other} met {name}."),
        _ => format!("the {obj} of {x} and {y}: {y}, {x}, {a}."),
    }
}

fn random_word(rng: &mut Rng) -> String {
    const CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    let n = 2 + rng.below(8);
    (0..n).map(|_| CHARS[rng.below(CHARS.len())] as char).collect()
}

fn integers(text: &str) -> Vec<i64> {
    text.split(|c: char| !c.is_ascii_digit()).filter(|s| !s.is_empty()).filter_map(|s| s.parse().ok()).collect()
}

fn problem_op(prompt: &str) -> Option<MathOp> {
    if prompt.contains(" buys ") && prompt.ends_with("more. how many?") {
        Some(MathOp::Add)
    } else if prompt.contains(" gives away ") && prompt.ends_with("how many left?") {
        Some(MathOp::Sub)
    } else if prompt.contains(" bags with ") && prompt.contains(" each. how many ") {
        Some(MathOp::Mul)
    } else {
        None
    }
}

fn parse_problem(prompt: &str) -> Option<(MathOp, i64, i64)> {
    let op = problem_op(prompt)?;
    match integers(prompt)[..] {
        [a, b] => Some((op, a, b)),
        _ => None,
    }
}

pub(crate) fn verify_math(e: &Example) -> bool {
    let Some((op, a, b)) = parse_problem(&e.prompt) else {
        return false;
    };
    let c = match op {
        MathOp::Add => a + b,
        MathOp::Sub => a - b,
        MathOp::Mul => a * b,
    };
    let worked = e.answer.lines().next().is_some_and(|line| line == format!("{a}{}{b}={c}", op.symbol()));
    worked
        && crate::eval::final_answer(&e.answer) == Some(c.to_string().as_str())
        && e.reference == Some(c)
        && (1..=MATH_MAX as i64).contains(&a)
        && (1..=MATH_MAX as i64).contains(&b)
}

pub(crate) fn verify_hard(e: &Example) -> bool {
    let Some((op, a, b)) = parse_problem(&e.prompt) else {
        return false;
    };
    let in_range = |v: i64| (HARD_MIN as i64..=HARD_MAX as i64).contains(&v);
    let truth = match op {
        MathOp::Add => a.checked_add(b),
        MathOp::Sub => a.checked_sub(b),
        MathOp::Mul => a.checked_mul(b),
    };
    in_range(a) && in_range(b) && truth.is_some() && e.reference == truth && eval_program(&e.answer, &Env::new()).ok() == truth
}

pub(crate) fn verify_code(e: &Example) -> bool {
    let Some(instr) = e.prompt.strip_prefix("write a program that ").and_then(|s| s.strip_suffix('.')) else {
        return false;
    };
    let words: Vec<&str> = instr.split(' ').collect();
    let expected = match words[..] {
        ["adds", x, "and", y] => format!("({x}+{y})"),
        ["subtracts", y, "from", x] => format!("({x}-{y})"),
        ["multiplies", x, "and", y] => format!("({x}*{y})"),
        ["adds", x, "and", y, "then", "multiplies", "by", z] => format!("(({x}+{y})*{z})"),
        ["subtracts", y, "from", x, "then", "multiplies", "by", z] => format!("(({x}-{y})*{z})"),
        ["multiplies", x, "and", y, "then", "adds", z] => format!("(({x}*{y})+{z})"),
        _ => return false,
    };
    if e.answer != format!("return {expected}") || parse_program(&e.answer).is_err() {
        return false;
    }
    let env: Env = IDENTS.iter().enumerate().map(|(i, id)| (id.to_string(), i as i64 + 2)).collect();
    eval_program(&e.answer, &env).is_ok()
}
