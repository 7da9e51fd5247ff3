use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;

use crate::kernels::CsrTile;
use crate::scalar::Scalar;

use super::GenError;

#[derive(Clone, Copy, PartialEq)]
enum Field {
    Real,
    Integer,
    Pattern,
}

#[derive(Clone, Copy, PartialEq)]
enum Symmetry {
    General,
    Symmetric,
    SkewSymmetric,
}

/// Reads a coordinate Matrix Market file. Gzip input is detected by its magic
/// bytes. Symmetric storage is expanded and pattern entries become 1.
pub fn read_matrix_market<T: Scalar>(path: impl AsRef<Path>) -> Result<CsrTile<T>, GenError> {
    let mut file = BufReader::new(File::open(path)?);
    let gz = file.fill_buf()?.starts_with(&[0x1f, 0x8b]);
    if gz {
        read_matrix_market_from(BufReader::new(MultiGzDecoder::new(file)))
    } else {
        read_matrix_market_from(file)
    }
}

fn parse_header(line: &str) -> Result<(Field, Symmetry), GenError> {
    let toks: Vec<String> = line.split_whitespace().map(str::to_ascii_lowercase).collect();
    if toks.len() != 5 || toks[0] != "%%matrixmarket" || toks[1] != "matrix" {
        return Err(GenError::parse(1, format!("malformed header {line:?}")));
    }
    if toks[2] != "coordinate" {
        return Err(GenError::parse(1, format!("unsupported format {:?}", toks[2])));
    }
    let field = match toks[3].as_str() {
        "real" | "double" => Field::Real,
        "integer" => Field::Integer,
        "pattern" => Field::Pattern,
        f => return Err(GenError::parse(1, format!("unsupported field {f:?}"))),
    };
    let sym = match toks[4].as_str() {
        "general" => Symmetry::General,
        "symmetric" => Symmetry::Symmetric,
        "skew-symmetric" => Symmetry::SkewSymmetric,
        s => return Err(GenError::parse(1, format!("unsupported symmetry {s:?}"))),
    };
    Ok((field, sym))
}

fn parse_num<N: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<N, GenError> {
    tok.ok_or_else(|| GenError::parse(line, format!("missing {what}")))?
        .parse()
        .map_err(|_| GenError::parse(line, format!("bad {what}")))
}

pub fn read_matrix_market_from<T: Scalar, R: Read>(reader: R) -> Result<CsrTile<T>, GenError> {
    let mut lines = BufReader::new(reader).lines().enumerate().map(|(i, l)| (i + 1, l));
    let header = match lines.next() {
        Some((_, l)) => l?,
        None => return Err(GenError::parse(1, "empty file")),
    };
    let (field, sym) = parse_header(&header)?;

    let mut size = None;
    let mut triplets = Vec::new();
    let mut declared = 0usize;
    let mut seen = 0usize;
    for (no, line) in lines {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let mut toks = t.split_whitespace();
        let Some((rows, cols)) = size else {
            let r: usize = parse_num(toks.next(), no, "row count")?;
            let c: usize = parse_num(toks.next(), no, "column count")?;
            declared = parse_num(toks.next(), no, "entry count")?;
            if sym != Symmetry::General && r != c {
                return Err(GenError::parse(no, "symmetric matrix must be square"));
            }
            size = Some((r, c));
            triplets.reserve(declared);
            continue;
        };
        let r: usize = parse_num(toks.next(), no, "row index")?;
        let c: usize = parse_num(toks.next(), no, "column index")?;
        if r == 0 || c == 0 || r > rows || c > cols {
            return Err(GenError::parse(no, format!("index ({r}, {c}) outside {rows}x{cols}")));
        }
        let v = match field {
            Field::Pattern => 1.0,
            Field::Real => parse_num::<f64>(toks.next(), no, "value")?,
            Field::Integer => parse_num::<i64>(toks.next(), no, "value")? as f64,
        };
        seen += 1;
        if seen > declared {
            return Err(GenError::parse(no, format!("more than the declared {declared} entries")));
        }
        let (r, c) = (r - 1, c - 1);
        triplets.push((r, c, T::from_f64(v)));
        if r != c {
            match sym {
                Symmetry::General => {}
                Symmetry::Symmetric => triplets.push((c, r, T::from_f64(v))),
                Symmetry::SkewSymmetric => triplets.push((c, r, T::from_f64(-v))),
            }
        }
    }
    let Some((rows, cols)) = size else {
        return Err(GenError::parse(1, "missing size line"));
    };
    if seen != declared {
        return Err(GenError::parse(0, format!("declared {declared} entries, found {seen}")));
    }
    Ok(CsrTile::from_triplets(rows, cols, triplets)?)
}

/// Writes `m` as `coordinate real general` with shortest round-trip values.
pub fn write_matrix_market<T: Scalar>(m: &CsrTile<T>, path: impl AsRef<Path>) -> Result<(), GenError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix_market_to(m, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_matrix_market_to<T: Scalar, W: Write>(m: &CsrTile<T>, w: &mut W) -> Result<(), GenError> {
    writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(w, "{} {} {}", m.rows(), m.cols(), m.nnz())?;
    for (r, c, v) in m.iter() {
        writeln!(w, "{} {} {}", r + 1, c + 1, v.as_f64())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::io::Cursor;

    use flate2::write::GzEncoder;
    use flate2::Compression;

    use super::*;
    use crate::gen_io::random_sparse;

    fn parse(s: &str) -> Result<CsrTile<f64>, GenError> {
        read_matrix_market_from(Cursor::new(s))
    }

    #[test]
    fn identity_file() {
        let m = parse("%%MatrixMarket matrix coordinate real general\n% c\n2 2 2\n1 1 1.0\n2 2 1.0\n").unwrap();
        assert_eq!(m, CsrTile::identity(2));
    }

    #[test]
    fn symmetric_expands() {
        let m = parse("%%MatrixMarket matrix coordinate real symmetric\n3 3 2\n2 1 4.5\n3 3 1\n").unwrap();
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.to_dense().get(0, 1), 4.5);
        assert_eq!(m.to_dense().get(1, 0), 4.5);
    }

    #[test]
    fn pattern_and_integer_fields() {
        let m = parse("%%MatrixMarket matrix coordinate pattern general\n2 3 2\n1 3\n2 1\n").unwrap();
        assert_eq!(m.values(), &[1.0, 1.0]);
        let m = parse("%%MatrixMarket matrix coordinate integer skew-symmetric\n2 2 1\n2 1 7\n").unwrap();
        assert_eq!(m.to_dense().get(0, 1), -7.0);
    }

    #[test]
    fn malformed_inputs() {
        assert!(parse("%%MatrixMarket matrix array real general\n2 2\n").is_err());
        assert!(parse("hello\n").is_err());
        assert!(parse("%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 1.0\n").is_err());
        assert!(parse("%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 1.0\n").is_err());
        assert!(parse("%%MatrixMarket matrix coordinate real general\n2 2 1\n1 1 x\n").is_err());
        assert!(parse("").is_err());
    }

    #[test]
    fn round_trip_plain_and_gzip() {
        let m: CsrTile<f64> = random_sparse(40, 30, 0.2, 9);
        let m = m.map_values(|v| v / 3.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mtx");
        write_matrix_market(&m, &p).unwrap();
        assert_eq!(read_matrix_market::<f64>(&p).unwrap(), m);

        let mut text = Vec::new();
        write_matrix_market_to(&m, &mut text).unwrap();
        let gz = dir.path().join("m.mtx.gz");
        let mut enc = GzEncoder::new(File::create(&gz).unwrap(), Compression::fast());
        enc.write_all(&text).unwrap();
        enc.finish().unwrap();
        assert_eq!(read_matrix_market::<f64>(&gz).unwrap(), m);
    }
}
