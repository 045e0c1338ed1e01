//! Reading and writing tensors in the NPY v1.0 format.
//!
//! Only little-endian `float32` (`'<f4'`) and `int32` (`'<i4'`) payloads in C
//! order are supported. Written headers are padded with spaces and terminated
//! by a newline so that the payload starts at a multiple of 64 bytes, which is
//! what numpy itself produces.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{LabelMask, ProbMap, ScoreMap};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const PREAMBLE_LEN: usize = 10;
const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    I32,
}

impl Dtype {
    fn descr(self) -> &'static str {
        match self {
            Dtype::F32 => "<f4",
            Dtype::I32 => "<i4",
        }
    }
}

/// A decoded NPY array before it is given a domain meaning.
#[derive(Debug, Clone, PartialEq)]
pub enum NpyArray {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    I32 { shape: Vec<usize>, data: Vec<i32> },
}

impl NpyArray {
    pub fn shape(&self) -> &[usize] {
        match self {
            NpyArray::F32 { shape, .. } | NpyArray::I32 { shape, .. } => shape,
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            NpyArray::F32 { .. } => Dtype::F32,
            NpyArray::I32 { .. } => Dtype::I32,
        }
    }
}

/// Any tensor decoded from an NPY file.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Prob(ProbMap),
    Label(LabelMask),
    Score(ScoreMap),
}

/// Types that can be written as an NPY array.
pub trait NpyWrite {
    fn npy_shape(&self) -> Vec<usize>;
    fn npy_dtype(&self) -> Dtype;
    fn npy_payload(&self) -> Vec<u8>;
}

impl NpyWrite for ProbMap {
    fn npy_shape(&self) -> Vec<usize> {
        vec![self.height(), self.width(), self.num_classes()]
    }
    fn npy_dtype(&self) -> Dtype {
        Dtype::F32
    }
    fn npy_payload(&self) -> Vec<u8> {
        self.data().iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

impl NpyWrite for ScoreMap {
    fn npy_shape(&self) -> Vec<usize> {
        vec![self.height(), self.width()]
    }
    fn npy_dtype(&self) -> Dtype {
        Dtype::F32
    }
    fn npy_payload(&self) -> Vec<u8> {
        self.data().iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

impl NpyWrite for LabelMask {
    fn npy_shape(&self) -> Vec<usize> {
        vec![self.height(), self.width()]
    }
    fn npy_dtype(&self) -> Dtype {
        Dtype::I32
    }
    fn npy_payload(&self) -> Vec<u8> {
        self.data().iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

impl NpyWrite for Tensor {
    fn npy_shape(&self) -> Vec<usize> {
        match self {
            Tensor::Prob(t) => t.npy_shape(),
            Tensor::Label(t) => t.npy_shape(),
            Tensor::Score(t) => t.npy_shape(),
        }
    }
    fn npy_dtype(&self) -> Dtype {
        match self {
            Tensor::Prob(t) => t.npy_dtype(),
            Tensor::Label(t) => t.npy_dtype(),
            Tensor::Score(t) => t.npy_dtype(),
        }
    }
    fn npy_payload(&self) -> Vec<u8> {
        match self {
            Tensor::Prob(t) => t.npy_payload(),
            Tensor::Label(t) => t.npy_payload(),
            Tensor::Score(t) => t.npy_payload(),
        }
    }
}

/// Serializes a header and payload into a complete NPY v1.0 byte buffer.
pub fn encode<T: NpyWrite + ?Sized>(tensor: &T) -> Vec<u8> {
    let shape = tensor.npy_shape();
    let shape_str = match shape.as_slice() {
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        tensor.npy_dtype().descr(),
        shape_str
    );
    let unpadded = PREAMBLE_LEN + header.len() + 1;
    let padding = (ALIGN - unpadded % ALIGN) % ALIGN;
    header.extend(std::iter::repeat_n(' ', padding));
    header.push('\n');

    let payload = tensor.npy_payload();
    let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Parses an NPY v1.0 byte buffer.
pub fn decode(bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < PREAMBLE_LEN || &bytes[..6] != MAGIC {
        return Err(Error::Format("missing NPY magic string".into()));
    }
    if bytes[6..8] != [1, 0] {
        return Err(Error::Format(format!(
            "unsupported NPY version {}.{}",
            bytes[6], bytes[7]
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let body_start = PREAMBLE_LEN + header_len;
    if bytes.len() < body_start {
        return Err(Error::Format("truncated NPY header".into()));
    }
    let header = std::str::from_utf8(&bytes[PREAMBLE_LEN..body_start])
        .map_err(|_| Error::Format("NPY header is not valid text".into()))?;
    let dict = HeaderDict::parse(header)?;

    if dict.fortran_order {
        return Err(Error::Schema(
            "Fortran-ordered arrays are not supported".into(),
        ));
    }
    let dtype = match dict.descr.as_str() {
        "<f4" => Dtype::F32,
        "<i4" => Dtype::I32,
        other => {
            return Err(Error::Schema(format!(
                "unsupported dtype '{other}', expected '<f4' or '<i4'"
            )))
        }
    };
    let count = dict
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("NPY shape overflows".into()))?;
    let payload = &bytes[body_start..];
    if payload.len() != count * 4 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, shape {:?} needs {}",
            payload.len(),
            dict.shape,
            count * 4
        )));
    }
    let words = payload.chunks_exact(4).map(|w| [w[0], w[1], w[2], w[3]]);
    Ok(match dtype {
        Dtype::F32 => NpyArray::F32 {
            shape: dict.shape,
            data: words.map(f32::from_le_bytes).collect(),
        },
        Dtype::I32 => NpyArray::I32 {
            shape: dict.shape,
            data: words.map(i32::from_le_bytes).collect(),
        },
    })
}

pub fn read_array(path: impl AsRef<Path>) -> Result<NpyArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Reads a tensor of the given rank. Rank 3 `<f4` loads as a [`ProbMap`],
/// rank 2 `<f4` as a [`ScoreMap`] and rank 2 `<i4` as a [`LabelMask`].
/// Probability maps are validated only when `validate` is set.
pub fn read_npy(path: impl AsRef<Path>, expected_rank: usize, validate: bool) -> Result<Tensor> {
    let array = read_array(path)?;
    if array.shape().len() != expected_rank {
        return Err(Error::Schema(format!(
            "expected rank {expected_rank}, file has shape {:?}",
            array.shape()
        )));
    }
    match array {
        NpyArray::F32 { shape, data } if shape.len() == 3 => {
            let map = ProbMap::new_unvalidated(shape[0], shape[1], shape[2], data)?;
            if validate {
                map.validate()?;
            }
            Ok(Tensor::Prob(map))
        }
        NpyArray::F32 { shape, data } if shape.len() == 2 => {
            Ok(Tensor::Score(ScoreMap::new(shape[0], shape[1], data)?))
        }
        NpyArray::I32 { shape, data } if shape.len() == 2 => {
            Ok(Tensor::Label(LabelMask::new(shape[0], shape[1], data)?))
        }
        other => Err(Error::Schema(format!(
            "no tensor type for dtype {:?} with rank {}",
            other.dtype(),
            other.shape().len()
        ))),
    }
}

pub fn read_prob_map(path: impl AsRef<Path>, validate: bool) -> Result<ProbMap> {
    match read_npy(path, 3, validate)? {
        Tensor::Prob(p) => Ok(p),
        _ => unreachable!("rank-3 reads only yield probability maps"),
    }
}

pub fn read_label_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    match read_npy(path, 2, true)? {
        Tensor::Label(m) => Ok(m),
        _ => Err(Error::Schema("expected an int32 label mask".into())),
    }
}

pub fn read_score_map(path: impl AsRef<Path>) -> Result<ScoreMap> {
    match read_npy(path, 2, true)? {
        Tensor::Score(s) => Ok(s),
        _ => Err(Error::Schema("expected a float32 score map".into())),
    }
}

pub fn write_npy<T: NpyWrite + ?Sized>(tensor: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(tensor)).map_err(|e| Error::io(path, e))
}

/// The three keys of an NPY header dictionary.
#[derive(Debug)]
struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

enum Value {
    Str(String),
    Bool(bool),
    Tuple(Vec<usize>),
}

impl HeaderDict {
    fn parse(text: &str) -> Result<Self> {
        let mut cur = Cursor {
            chars: text.trim_end().chars().collect(),
            pos: 0,
        };
        cur.expect('{')?;
        let (mut descr, mut fortran, mut shape) = (None, None, None);
        loop {
            cur.skip_ws();
            if cur.eat('}') {
                break;
            }
            let key = cur.string()?;
            cur.skip_ws();
            cur.expect(':')?;
            cur.skip_ws();
            let value = cur.value()?;
            match (key.as_str(), value) {
                ("descr", Value::Str(s)) => descr = Some(s),
                ("fortran_order", Value::Bool(b)) => fortran = Some(b),
                ("shape", Value::Tuple(t)) => shape = Some(t),
                (k, _) => return Err(Error::Format(format!("unexpected header entry '{k}'"))),
            }
            cur.skip_ws();
            if !cur.eat(',') {
                cur.skip_ws();
                cur.expect('}')?;
                break;
            }
        }
        cur.skip_ws();
        if cur.pos != cur.chars.len() {
            return Err(Error::Format(
                "trailing bytes after header dictionary".into(),
            ));
        }
        match (descr, fortran, shape) {
            (Some(descr), Some(fortran_order), Some(shape)) => Ok(Self {
                descr,
                fortran_order,
                shape,
            }),
            _ => Err(Error::Format(
                "header must define 'descr', 'fortran_order' and 'shape'".into(),
            )),
        }
    }
}

struct Cursor {
    chars: Vec<char>,
    pos: usize,
}

impl Cursor {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "malformed NPY header: expected '{c}' at offset {}",
                self.pos
            )))
        }
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.pos += 1;
        }
    }

    fn string(&mut self) -> Result<String> {
        let quote = match self.peek() {
            Some(q @ ('\'' | '"')) => q,
            _ => {
                return Err(Error::Format(
                    "malformed NPY header: expected a string".into(),
                ))
            }
        };
        self.pos += 1;
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c == quote {
                let s: String = self.chars[start..self.pos].iter().collect();
                self.pos += 1;
                return Ok(s);
            }
            self.pos += 1;
        }
        Err(Error::Format(
            "malformed NPY header: unterminated string".into(),
        ))
    }

    fn word(&mut self) -> String {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric()) {
            self.pos += 1;
        }
        self.chars[start..self.pos].iter().collect()
    }

    fn value(&mut self) -> Result<Value> {
        match self.peek() {
            Some('\'' | '"') => Ok(Value::Str(self.string()?)),
            Some('(') => {
                self.pos += 1;
                let mut dims = Vec::new();
                loop {
                    self.skip_ws();
                    if self.eat(')') {
                        break;
                    }
                    let digits = self.word();
                    let dim = digits.parse::<usize>().map_err(|_| {
                        Error::Format(format!("malformed NPY shape entry '{digits}'"))
                    })?;
                    dims.push(dim);
                    self.skip_ws();
                    if !self.eat(',') {
                        self.skip_ws();
                        self.expect(')')?;
                        break;
                    }
                }
                Ok(Value::Tuple(dims))
            }
            _ => match self.word().as_str() {
                "True" => Ok(Value::Bool(true)),
                "False" => Ok(Value::Bool(false)),
                w => Err(Error::Format(format!("malformed NPY header value '{w}'"))),
            },
        }
    }
}
