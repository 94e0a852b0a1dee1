//! Binary PNM rasters: P6 (RGB) for slides, P5 (grey) for masks and heatmaps.
//!
//! Only 8-bit rasters (maxval 255) are supported. A P6 header may carry a
//! resolution comment `# mpp <value>` (or `# mpp=<value>`), which is how a
//! flat raster declares its microns-per-pixel.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub data: Vec<u8>,
    pub mpp: Option<f64>,
}

pub fn write_ppm<W: Write>(
    mut sink: W,
    width: usize,
    height: usize,
    rgb: &[u8],
    mpp: Option<f64>,
) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::invalid("rgb buffer does not match dimensions"));
    }
    writeln!(sink, "P6")?;
    if let Some(mpp) = mpp {
        writeln!(sink, "# mpp {mpp}")?;
    }
    write!(sink, "{width} {height}\n255\n")?;
    sink.write_all(rgb)?;
    Ok(())
}

pub fn write_pgm<W: Write>(mut sink: W, width: usize, height: usize, grey: &[u8]) -> Result<()> {
    if grey.len() != width * height {
        return Err(Error::invalid("grey buffer does not match dimensions"));
    }
    write!(sink, "P5\n{width} {height}\n255\n")?;
    sink.write_all(grey)?;
    Ok(())
}

pub fn read_pnm<R: BufRead>(mut source: R) -> Result<Pnm> {
    let mut header = Header::default();
    let magic = header.token(&mut source)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::invalid(format!("unsupported PNM magic {other:?}"))),
    };
    let width = header.number(&mut source)?;
    let height = header.number(&mut source)?;
    let maxval = header.number(&mut source)?;
    if maxval != 255 {
        return Err(Error::invalid(format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::invalid("empty raster"));
    }
    let mut data = vec![0u8; width * height * channels];
    source
        .read_exact(&mut data)
        .map_err(|_| Error::Truncated("pnm pixel data"))?;
    Ok(Pnm { width, height, channels, data, mpp: header.mpp })
}

#[derive(Default)]
struct Header {
    mpp: Option<f64>,
}

impl Header {
    fn byte<R: BufRead>(source: &mut R) -> Result<Option<u8>> {
        let mut b = [0u8; 1];
        match source.read(&mut b)? {
            0 => Ok(None),
            _ => Ok(Some(b[0])),
        }
    }

    // Reads one whitespace-delimited token, consuming exactly one trailing
    // whitespace byte so the raster starts right after the maxval.
    fn token<R: BufRead>(&mut self, source: &mut R) -> Result<String> {
        let mut out = String::new();
        loop {
            let Some(b) = Self::byte(source)? else {
                return Err(Error::Truncated("pnm header"));
            };
            if b == b'#' && out.is_empty() {
                let mut line = String::new();
                source.read_line(&mut line)?;
                self.comment(&line);
                continue;
            }
            if b.is_ascii_whitespace() {
                if out.is_empty() {
                    continue;
                }
                return Ok(out);
            }
            out.push(b as char);
        }
    }

    fn number<R: BufRead>(&mut self, source: &mut R) -> Result<usize> {
        let tok = self.token(source)?;
        tok.parse()
            .map_err(|_| Error::invalid(format!("bad PNM header field {tok:?}")))
    }

    fn comment(&mut self, line: &str) {
        let body = line.trim();
        let Some(rest) = body.strip_prefix("mpp") else { return };
        let rest = rest.trim_start_matches(|c: char| c == '=' || c == ':' || c.is_whitespace());
        if let Ok(v) = rest.trim().parse::<f64>() {
            self.mpp = Some(v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_with_mpp() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|v| v as u8).collect();
        let mut buf = Vec::new();
        write_ppm(&mut buf, 2, 3, &rgb, Some(0.25)).unwrap();
        let img = read_pnm(&buf[..]).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 3, 3));
        assert_eq!(img.data, rgb);
        assert_eq!(img.mpp, Some(0.25));
    }

    #[test]
    fn pgm_round_trip() {
        let grey = vec![0u8, 255, 10, 20];
        let mut buf = Vec::new();
        write_pgm(&mut buf, 2, 2, &grey).unwrap();
        let img = read_pnm(&buf[..]).unwrap();
        assert_eq!(img.channels, 1);
        assert_eq!(img.data, grey);
        assert_eq!(img.mpp, None);
    }

    #[test]
    fn pixel_bytes_that_look_like_whitespace_survive() {
        // First pixel byte is '\n'; the header parser must not eat it.
        let grey = vec![b'\n', b' ', b'#', 7];
        let mut buf = Vec::new();
        write_pgm(&mut buf, 4, 1, &grey).unwrap();
        assert_eq!(read_pnm(&buf[..]).unwrap().data, grey);
    }

    #[test]
    fn truncated_raster_is_reported() {
        let buf = b"P5\n4 4\n255\n\x00\x01".to_vec();
        assert!(matches!(read_pnm(&buf[..]), Err(Error::Truncated(_))));
    }

    #[test]
    fn alternative_mpp_comment_forms() {
        let buf = b"P6\n# mpp=0.5\n1 1\n255\n\x01\x02\x03".to_vec();
        assert_eq!(read_pnm(&buf[..]).unwrap().mpp, Some(0.5));
    }
}
