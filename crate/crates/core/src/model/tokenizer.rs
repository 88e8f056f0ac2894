use std::collections::HashMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Number of merge rules the pretrained text encoder was trained with.
pub const PRETRAINED_MERGES: usize = 49152 - 256 - 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TokenizerSpec {
    /// Lowercased word hashing into the configured vocabulary.
    Toy,
    /// Byte-pair encoding from a merges file (plain or gzip).
    Bpe { merges: PathBuf },
}

#[derive(Clone, Debug)]
pub enum Tokenizer {
    Toy(ToyTokenizer),
    Bpe(BpeTokenizer),
}

impl Tokenizer {
    pub fn from_spec(spec: &TokenizerSpec, vocab_size: usize) -> Result<Self> {
        match spec {
            TokenizerSpec::Toy => Ok(Tokenizer::Toy(ToyTokenizer::new(vocab_size)?)),
            TokenizerSpec::Bpe { merges } => {
                let t = BpeTokenizer::from_file(merges)?;
                if t.vocab_size() != vocab_size {
                    return Err(Error::invalid(format!(
                        "merges file yields {} tokens but the text encoder expects {vocab_size}",
                        t.vocab_size()
                    )));
                }
                Ok(Tokenizer::Bpe(t))
            }
        }
    }

    pub fn sot(&self) -> u32 {
        match self {
            Tokenizer::Toy(_) => ToyTokenizer::SOT,
            Tokenizer::Bpe(b) => b.sot,
        }
    }

    pub fn eot(&self) -> u32 {
        match self {
            Tokenizer::Toy(_) => ToyTokenizer::EOT,
            Tokenizer::Bpe(b) => b.eot,
        }
    }

    fn body(&self, text: &str) -> Vec<u32> {
        match self {
            Tokenizer::Toy(t) => t.body(text),
            Tokenizer::Bpe(b) => b.body(text),
        }
    }

    /// `[SOT, tokens…, EOT]`, truncated to `context_length` with the end
    /// token kept.
    pub fn encode(&self, text: &str, context_length: usize) -> Vec<u32> {
        let mut ids = Vec::with_capacity(context_length);
        ids.push(self.sot());
        ids.extend(self.body(text));
        ids.push(self.eot());
        truncate_tokens(&ids, context_length, self.eot())
    }
}

/// Keeps the first `context_length - 1` ids and terminates with `eot`.
pub fn truncate_tokens(ids: &[u32], context_length: usize, eot: u32) -> Vec<u32> {
    if ids.len() <= context_length {
        return ids.to_vec();
    }
    let mut out = ids[..context_length - 1].to_vec();
    out.push(eot);
    out
}

#[derive(Clone, Debug)]
pub struct ToyTokenizer {
    vocab_size: usize,
    pattern: Regex,
}

impl ToyTokenizer {
    pub const PAD: u32 = 0;
    pub const SOT: u32 = 1;
    pub const EOT: u32 = 2;
    const RESERVED: usize = 3;

    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size <= Self::RESERVED {
            return Err(Error::invalid("toy vocabulary must exceed the 3 reserved ids"));
        }
        Ok(Self {
            vocab_size,
            pattern: Regex::new(r"[a-z]+|[0-9]|[^\sa-z0-9]").expect("static pattern"),
        })
    }

    pub fn words(&self, text: &str) -> Vec<String> {
        let lower = text.to_lowercase();
        self.pattern.find_iter(&lower).map(|m| m.as_str().to_string()).collect()
    }

    pub fn id(&self, word: &str) -> u32 {
        // FNV-1a, 64-bit.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        (Self::RESERVED as u64 + h % (self.vocab_size - Self::RESERVED) as u64) as u32
    }

    fn body(&self, text: &str) -> Vec<u32> {
        self.words(text).iter().map(|w| self.id(w)).collect()
    }
}

fn bytes_to_unicode() -> Vec<char> {
    let mut bs: Vec<u32> = ('!' as u32..='~' as u32)
        .chain('¡' as u32..='¬' as u32)
        .chain('®' as u32..='ÿ' as u32)
        .collect();
    let mut cs = bs.clone();
    let mut n = 0;
    for b in 0..256u32 {
        if !bs.contains(&b) {
            bs.push(b);
            cs.push(256 + n);
            n += 1;
        }
    }
    let mut table = vec!['\0'; 256];
    for (b, c) in bs.into_iter().zip(cs) {
        table[b as usize] = char::from_u32(c).expect("valid code point");
    }
    table
}

/// Byte-level BPE compatible with the pretrained text encoder's vocabulary.
#[derive(Clone, Debug)]
pub struct BpeTokenizer {
    byte_encoder: Vec<char>,
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    pattern: Regex,
    sot: u32,
    eot: u32,
}

impl BpeTokenizer {
    /// Builds from merges text: one header line, then `left right` per line.
    /// At most [`PRETRAINED_MERGES`] rules are read.
    pub fn from_merges(text: &str) -> Result<Self> {
        let merges: Vec<(String, String)> = text
            .lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .take(PRETRAINED_MERGES)
            .map(|l| {
                let mut it = l.split_whitespace();
                match (it.next(), it.next(), it.next()) {
                    (Some(a), Some(b), None) => Ok((a.to_string(), b.to_string())),
                    _ => Err(Error::format(format!("malformed merge rule `{l}`"))),
                }
            })
            .collect::<Result<_>>()?;
        let byte_encoder = bytes_to_unicode();
        let mut vocab: Vec<String> = byte_encoder.iter().map(|c| c.to_string()).collect();
        vocab.extend(byte_encoder.iter().map(|c| format!("{c}</w>")));
        vocab.extend(merges.iter().map(|(a, b)| format!("{a}{b}")));
        vocab.push("<|startoftext|>".into());
        vocab.push("<|endoftext|>".into());
        let sot = (vocab.len() - 2) as u32;
        let eot = (vocab.len() - 1) as u32;
        let encoder = vocab.into_iter().enumerate().map(|(i, v)| (v, i as u32)).collect();
        let ranks = merges.into_iter().enumerate().map(|(i, m)| (m, i)).collect();
        let pattern = Regex::new(
            r"(?i)<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|\p{L}+|\p{N}|[^\s\p{L}\p{N}]+",
        )
        .expect("static pattern");
        Ok(Self {
            byte_encoder,
            encoder,
            ranks,
            pattern,
            sot,
            eot,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = if raw.starts_with(&[0x1f, 0x8b]) {
            let mut s = String::new();
            flate2::read::GzDecoder::new(raw.as_slice())
                .read_to_string(&mut s)
                .map_err(|e| Error::io(path, e))?;
            s
        } else {
            String::from_utf8(raw).map_err(|_| Error::format(format!("{} is not UTF-8", path.display())))?
        };
        Self::from_merges(&text)
    }

    pub fn vocab_size(&self) -> usize {
        self.eot as usize + 1
    }

    fn bpe(&self, token: &str) -> Vec<String> {
        let chars: Vec<char> = token.chars().collect();
        let mut word: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        if let Some(last) = word.last_mut() {
            last.push_str("</w>");
        }
        loop {
            let best = word
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w[0].clone(), w[1].clone())))
                .min_by_key(|x| x.0);
            let Some((_, a, b)) = best else { break };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == a && word[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
            if word.len() == 1 {
                break;
            }
        }
        word
    }

    fn body(&self, text: &str) -> Vec<u32> {
        let clean = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(&clean) {
            let mapped: String = m.as_str().bytes().map(|b| self.byte_encoder[b as usize]).collect();
            for piece in self.bpe(&mapped) {
                // Every single byte symbol is in the vocabulary, so unmerged
                // pieces always resolve.
                if let Some(&id) = self.encoder.get(&piece) {
                    ids.push(id);
                }
            }
        }
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_ids_are_stable_and_in_range() {
        let t = ToyTokenizer::new(4096).unwrap();
        assert_eq!(t.words("Ill-defined, 17.0 mm"), ["ill", "-", "defined", ",", "1", "7", ".", "0", "mm"]);
        let ids = Tokenizer::Toy(t.clone()).encode("A Spiculated nodule", 77);
        assert_eq!(ids[0], 1);
        assert_eq!(*ids.last().unwrap(), 2);
        assert_eq!(ids.len(), 5);
        assert!(ids[1..4].iter().all(|&i| (3..4096).contains(&i)));
        assert_eq!(t.id("spiculated"), t.id("spiculated"));
        // FNV-1a of the empty string is the offset basis.
        assert_eq!(t.id(""), (3 + 0xcbf2_9ce4_8422_2325u64 % 4093) as u32);
    }

    #[test]
    fn truncation_keeps_end_token() {
        let t = Tokenizer::Toy(ToyTokenizer::new(64).unwrap());
        let long = "word ".repeat(200);
        let ids = t.encode(&long, 77);
        assert_eq!(ids.len(), 77);
        assert_eq!(ids[76], 2);
        assert_eq!(truncate_tokens(&[1, 5, 2], 77, 2), vec![1, 5, 2]);
    }

    #[test]
    fn byte_table_is_a_bijection() {
        let t = bytes_to_unicode();
        let mut seen: Vec<char> = t.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 256);
        assert_eq!(t[b'a' as usize], 'a');
        assert_eq!(t[b' ' as usize], 'Ġ');
    }

    #[test]
    fn bpe_applies_merges_by_rank() {
        let merges = "#version: 0.2\nn o\nno d\nu l\nnod ul\nnodul e</w>\n";
        let t = BpeTokenizer::from_merges(merges).unwrap();
        assert_eq!(t.vocab_size(), 512 + 5 + 2);
        assert_eq!(t.bpe("nodule"), vec!["nodule</w>"]);
        assert_eq!(t.bpe("node"), vec!["nod", "e</w>"]);
        let ids = t.body("Nodule  nodule");
        let nodule = t.encoder["nodule</w>"];
        assert_eq!(ids, vec![nodule, nodule]);
        let tok = Tokenizer::Bpe(t);
        let full = tok.encode("nodule", 77);
        assert_eq!(full, vec![517, nodule, 518]);
    }

    #[test]
    fn bpe_falls_back_to_bytes() {
        let t = BpeTokenizer::from_merges("#header\n").unwrap();
        let ids = t.body("ab!");
        assert_eq!(ids, vec![t.encoder["a"], t.encoder["b</w>"], t.encoder["!</w>"]]);
    }
}
