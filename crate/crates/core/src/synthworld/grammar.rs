//! Token vocabulary, question templates and the rule-based answerer.

use serde::{Deserialize, Serialize};

use super::image::{Color, Shape, Size, WorldImage};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;

/// Question vocabulary. Index = token id.
pub const WORDS: [&str; 23] = [
    "<pad>", "<start>", "<end>", "what", "color", "shape", "is", "the", "object", "how", "many",
    "there", "a", "?", "red", "green", "blue", "yellow", "circle", "square", "triangle", "small",
    "large",
];

pub const VOCAB_SIZE: usize = WORDS.len();

/// Maximum question length, end token included.
pub const MAX_QUESTION_LEN: usize = 8;

const W_WHAT: usize = 3;
const W_COLOR: usize = 4;
const W_SHAPE: usize = 5;
const W_IS: usize = 6;
const W_THE: usize = 7;
const W_OBJECT: usize = 8;
const W_HOW: usize = 9;
const W_MANY: usize = 10;
const W_THERE: usize = 11;
const W_A: usize = 12;
const W_QMARK: usize = 13;
const W_FIRST_COLOR: usize = 14;
const W_FIRST_SHAPE: usize = 18;
const W_FIRST_SIZE: usize = 21;

pub fn word_id(w: &str) -> Option<usize> {
    WORDS.iter().position(|x| *x == w)
}

fn color_word(c: Color) -> usize {
    W_FIRST_COLOR + c as usize
}

fn shape_word(s: Shape) -> usize {
    W_FIRST_SHAPE + s as usize
}

fn as_color(w: usize) -> Option<Color> {
    (W_FIRST_COLOR..W_FIRST_COLOR + 4)
        .contains(&w)
        .then(|| Color::ALL[w - W_FIRST_COLOR])
}

fn as_shape(w: usize) -> Option<Shape> {
    (W_FIRST_SHAPE..W_FIRST_SHAPE + 3)
        .contains(&w)
        .then(|| Shape::ALL[w - W_FIRST_SHAPE])
}

fn as_size(w: usize) -> Option<Size> {
    (W_FIRST_SIZE..W_FIRST_SIZE + 2)
        .contains(&w)
        .then(|| Size::ALL[w - W_FIRST_SIZE])
}

/// Closed answer vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Red,
    Green,
    Blue,
    Yellow,
    Circle,
    Square,
    Triangle,
    Zero,
    One,
    Two,
    Three,
    Four,
    Yes,
    No,
    NotRelevant,
}

impl Answer {
    pub const ALL: [Answer; 15] = [
        Answer::Red,
        Answer::Green,
        Answer::Blue,
        Answer::Yellow,
        Answer::Circle,
        Answer::Square,
        Answer::Triangle,
        Answer::Zero,
        Answer::One,
        Answer::Two,
        Answer::Three,
        Answer::Four,
        Answer::Yes,
        Answer::No,
        Answer::NotRelevant,
    ];

    pub const COUNT: usize = 15;

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Answer> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Answer::Red => "red",
            Answer::Green => "green",
            Answer::Blue => "blue",
            Answer::Yellow => "yellow",
            Answer::Circle => "circle",
            Answer::Square => "square",
            Answer::Triangle => "triangle",
            Answer::Zero => "zero",
            Answer::One => "one",
            Answer::Two => "two",
            Answer::Three => "three",
            Answer::Four => "four",
            Answer::Yes => "yes",
            Answer::No => "no",
            Answer::NotRelevant => "not_relevant",
        }
    }

    pub fn parse(s: &str) -> Option<Answer> {
        Self::ALL.iter().copied().find(|a| a.name() == s)
    }

    fn count(n: usize) -> Answer {
        [Answer::Zero, Answer::One, Answer::Two, Answer::Three, Answer::Four][n.min(4)]
    }

    fn of_color(c: Color) -> Answer {
        Self::ALL[c as usize]
    }

    fn of_shape(s: Shape) -> Answer {
        Self::ALL[4 + s as usize]
    }
}

/// Attribute a counting question can ask about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CountAttr {
    Color(Color),
    Shape(Shape),
    Size(Size),
}

/// Question templates with their slot fillers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Template {
    /// "what color is the <shape> ?"
    ColorOfShape(Shape),
    /// "what shape is the <color> object ?"
    ShapeOfColor(Color),
    /// "how many <attr> ?"
    Count(CountAttr),
    /// "is there a <color> <shape> ?"
    Exists(Color, Shape),
}

/// Template families, used for configuration and coverage checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    ColorOfShape,
    ShapeOfColor,
    Count,
    Exists,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 4] = [
        TemplateKind::ColorOfShape,
        TemplateKind::ShapeOfColor,
        TemplateKind::Count,
        TemplateKind::Exists,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            TemplateKind::ColorOfShape => "color_of_shape",
            TemplateKind::ShapeOfColor => "shape_of_color",
            TemplateKind::Count => "count",
            TemplateKind::Exists => "exists",
        }
    }

    pub fn parse(s: &str) -> Option<TemplateKind> {
        Self::ALL.iter().copied().find(|k| k.name() == s)
    }
}

impl Template {
    pub fn kind(&self) -> TemplateKind {
        match self {
            Template::ColorOfShape(_) => TemplateKind::ColorOfShape,
            Template::ShapeOfColor(_) => TemplateKind::ShapeOfColor,
            Template::Count(_) => TemplateKind::Count,
            Template::Exists(..) => TemplateKind::Exists,
        }
    }

    /// Token ids, terminated by the end token.
    pub fn tokens(&self) -> Vec<usize> {
        let mut t = match *self {
            Template::ColorOfShape(s) => vec![W_WHAT, W_COLOR, W_IS, W_THE, shape_word(s), W_QMARK],
            Template::ShapeOfColor(c) => {
                vec![W_WHAT, W_SHAPE, W_IS, W_THE, color_word(c), W_OBJECT, W_QMARK]
            }
            Template::Count(a) => {
                let w = match a {
                    CountAttr::Color(c) => color_word(c),
                    CountAttr::Shape(s) => shape_word(s),
                    CountAttr::Size(s) => W_FIRST_SIZE + s as usize,
                };
                vec![W_HOW, W_MANY, w, W_QMARK]
            }
            Template::Exists(c, s) => vec![W_IS, W_THERE, W_A, color_word(c), shape_word(s), W_QMARK],
        };
        t.push(END);
        t
    }

    pub fn question(&self) -> Question {
        Question {
            tokens: self.tokens(),
            template_id: Some(self.kind().id()),
        }
    }

    /// Parses tokens up to (excluding) the first end token.
    pub fn parse(tokens: &[usize]) -> Option<Template> {
        let body: &[usize] = match tokens.iter().position(|&t| t == END) {
            Some(e) => &tokens[..e],
            None => tokens,
        };
        match *body {
            [W_WHAT, W_COLOR, W_IS, W_THE, s, W_QMARK] => as_shape(s).map(Template::ColorOfShape),
            [W_WHAT, W_SHAPE, W_IS, W_THE, c, W_OBJECT, W_QMARK] => as_color(c).map(Template::ShapeOfColor),
            [W_HOW, W_MANY, a, W_QMARK] => as_color(a)
                .map(CountAttr::Color)
                .or_else(|| as_shape(a).map(CountAttr::Shape))
                .or_else(|| as_size(a).map(CountAttr::Size))
                .map(Template::Count),
            [W_IS, W_THERE, W_A, c, s, W_QMARK] => Some(Template::Exists(as_color(c)?, as_shape(s)?)),
            _ => None,
        }
    }

    /// Every filled template of the given family.
    pub fn enumerate(kind: TemplateKind) -> Vec<Template> {
        match kind {
            TemplateKind::ColorOfShape => Shape::ALL.iter().map(|&s| Template::ColorOfShape(s)).collect(),
            TemplateKind::ShapeOfColor => Color::ALL.iter().map(|&c| Template::ShapeOfColor(c)).collect(),
            TemplateKind::Count => Color::ALL
                .iter()
                .map(|&c| CountAttr::Color(c))
                .chain(Shape::ALL.iter().map(|&s| CountAttr::Shape(s)))
                .chain(Size::ALL.iter().map(|&s| CountAttr::Size(s)))
                .map(Template::Count)
                .collect(),
            TemplateKind::Exists => Color::ALL
                .iter()
                .flat_map(|&c| Shape::ALL.iter().map(move |&s| Template::Exists(c, s)))
                .collect(),
        }
    }
}

/// A tokenized question: at most [`MAX_QUESTION_LEN`] ids, ending in [`END`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Question {
    pub tokens: Vec<usize>,
    pub template_id: Option<u8>,
}

impl Question {
    /// Builds a question from raw ids, truncating at the first end token and
    /// forcing termination within the length cap.
    pub fn from_tokens(ids: &[usize]) -> Question {
        let mut tokens: Vec<usize> = ids
            .iter()
            .copied()
            .take_while(|&t| t != END)
            .take(MAX_QUESTION_LEN - 1)
            .collect();
        tokens.push(END);
        let template_id = Template::parse(&tokens).map(|t| t.kind().id());
        Question { tokens, template_id }
    }

    pub fn parse_text(text: &str) -> Option<Question> {
        let ids: Option<Vec<usize>> = text.split_whitespace().map(word_id).collect();
        Some(Question::from_tokens(&ids?))
    }

    /// Words without the end token.
    pub fn words(&self) -> Vec<&'static str> {
        self.tokens
            .iter()
            .take_while(|&&t| t != END)
            .map(|&t| WORDS.get(t).copied().unwrap_or("<unk>"))
            .collect()
    }

    pub fn text(&self) -> String {
        self.words().join(" ")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        !self.tokens.is_empty()
            && self.tokens.len() <= MAX_QUESTION_LEN
            && self.tokens.iter().all(|&t| t < VOCAB_SIZE)
            && self.tokens.iter().filter(|&&t| t == END).count() == 1
            && *self.tokens.last().unwrap() == END
    }
}

/// Rule-based answerer. Pure function of `(image, question)`.
///
/// Unparseable token sequences, and attribute questions whose referent is
/// missing from the image, answer `NotRelevant`. Colour/shape lookups with
/// several matches answer from the lowest-index present slot.
pub fn ask_oracle(image: &WorldImage, question: &Question) -> Answer {
    let Some(template) = Template::parse(&question.tokens) else {
        return Answer::NotRelevant;
    };
    if !question.is_valid() {
        return Answer::NotRelevant;
    }
    let present = || image.slots.iter().filter(|s| s.present);
    match template {
        Template::ColorOfShape(shape) => present()
            .find(|s| s.shape == shape)
            .map(|s| Answer::of_color(s.color))
            .unwrap_or(Answer::NotRelevant),
        Template::ShapeOfColor(color) => present()
            .find(|s| s.color == color)
            .map(|s| Answer::of_shape(s.shape))
            .unwrap_or(Answer::NotRelevant),
        Template::Count(attr) => Answer::count(
            present()
                .filter(|s| match attr {
                    CountAttr::Color(c) => s.color == c,
                    CountAttr::Shape(sh) => s.shape == sh,
                    CountAttr::Size(sz) => s.size == sz,
                })
                .count(),
        ),
        Template::Exists(c, sh) => {
            if present().any(|s| s.color == c && s.shape == sh) {
                Answer::Yes
            } else {
                Answer::No
            }
        }
    }
}
