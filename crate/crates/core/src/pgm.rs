//! Plain (P2) PGM encoding of label masks. Gray level = class index and
//! `maxval = max(K − 1, 1)`, so `K = maxval + 1` on the way back in.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::field::LabelField;

pub fn write_pgm(labels: &LabelField) -> String {
    let shape = labels.shape();
    let maxval = (shape.num_classes - 1).max(1);
    let mut out = format!("P2\n{} {}\n{}\n", shape.width, shape.height, maxval);
    for row in labels.labels().chunks(shape.width) {
        let line: Vec<String> = row.iter().map(|l| l.to_string()).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

fn tokens(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .map(|line| line.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace)
}

pub fn read_pgm(text: &str) -> Result<LabelField> {
    let mut it = tokens(text);
    if it.next() != Some("P2") {
        return Err(Error::InvalidInput("not a plain PGM (missing P2 magic)".into()));
    }
    let mut header = [0usize; 3];
    for (slot, name) in header.iter_mut().zip(["width", "height", "maxval"]) {
        let tok = it
            .next()
            .ok_or_else(|| Error::InvalidInput(format!("PGM header missing {name}")))?;
        *slot = tok
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad PGM {name}: {tok}")))?;
    }
    let [width, height, maxval] = header;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::InvalidInput(format!("PGM maxval out of range: {maxval}")));
    }
    let labels = it
        .map(|tok| {
            tok.parse::<usize>()
                .map_err(|_| Error::InvalidInput(format!("bad PGM sample: {tok}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if labels.len() != width * height {
        return Err(Error::InvalidInput(format!(
            "PGM has {} samples, expected {}",
            labels.len(),
            width * height
        )));
    }
    LabelField::new(height, width, maxval + 1, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let g = LabelField::new(2, 3, 4, vec![0, 1, 2, 3, 3, 0]).unwrap();
        let text = write_pgm(&g);
        assert_eq!(text, "P2\n3 2\n3\n0 1 2\n3 3 0\n");
        assert_eq!(read_pgm(&text).unwrap(), g);
    }

    #[test]
    fn binary_maxval_and_comments() {
        let text = "P2\n# mask\n2 2 # w h\n1\n0 1\n1 1\n";
        let g = read_pgm(text).unwrap();
        assert_eq!(g.num_classes(), 2);
        assert_eq!(g.labels(), &[0, 1, 1, 1]);
    }

    #[test]
    fn rejects_malformed() {
        assert!(read_pgm("P5\n1 1\n1\n0").is_err());
        assert!(read_pgm("P2\n2 2\n1\n0 1 1").is_err());
        assert!(read_pgm("P2\n1 1\n1\n2").is_err());
        assert!(read_pgm("P2\n1 1\n0\n0").is_err());
    }
}
