//! Binary bag layout, all little-endian:
//!
//! ```text
//! magic    "ECTB"
//! version  u16 = 1
//! id_len   u16, then id_len bytes of UTF-8 slide id
//! n_tiles  u32
//! dim      u32
//! tile_px  u32
//! mpp      f32
//! coords   n_tiles x (x u32, y u32)
//! features n_tiles x dim f32, row-major
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::FeatureBag;
use crate::error::{Error, Result};

pub const BAG_MAGIC: [u8; 4] = *b"ECTB";
pub const BAG_VERSION: u16 = 1;

pub fn write_bag<W: Write>(bag: &FeatureBag, mut sink: W) -> Result<()> {
    bag.validate()?;
    let id = bag.slide_id.as_bytes();
    let id_len = u16::try_from(id.len()).map_err(|_| Error::invalid("slide id longer than 65535 bytes"))?;
    let n = u32::try_from(bag.n_tiles()).map_err(|_| Error::invalid("too many tiles"))?;
    let dim = u32::try_from(bag.dim).map_err(|_| Error::invalid("dimension too large"))?;

    sink.write_all(&BAG_MAGIC)?;
    sink.write_all(&BAG_VERSION.to_le_bytes())?;
    sink.write_all(&id_len.to_le_bytes())?;
    sink.write_all(id)?;
    sink.write_all(&n.to_le_bytes())?;
    sink.write_all(&dim.to_le_bytes())?;
    sink.write_all(&bag.tile_size_px.to_le_bytes())?;
    sink.write_all(&bag.mpp.to_le_bytes())?;
    for &(x, y) in &bag.tile_xy {
        sink.write_all(&x.to_le_bytes())?;
        sink.write_all(&y.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(bag.features.len() * 4);
    for v in &bag.features {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(source: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated(what),
        _ => Error::Io(e),
    })
}

fn read_u16<R: Read>(source: &mut R, what: &'static str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(source, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(source: &mut R, what: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(source, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_bag<R: Read>(mut source: R) -> Result<FeatureBag> {
    let mut magic = [0u8; 4];
    read_exact(&mut source, &mut magic, "magic")?;
    if magic != BAG_MAGIC {
        return Err(Error::BadMagic { expected: BAG_MAGIC, found: magic });
    }
    let version = read_u16(&mut source, "version")?;
    if version != BAG_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let id_len = read_u16(&mut source, "slide id length")? as usize;
    let mut id = vec![0u8; id_len];
    read_exact(&mut source, &mut id, "slide id")?;
    let slide_id = String::from_utf8(id).map_err(|_| Error::invalid("slide id is not UTF-8"))?;
    let n = read_u32(&mut source, "tile count")? as usize;
    let dim = read_u32(&mut source, "dimension")? as usize;
    let tile_size_px = read_u32(&mut source, "tile size")?;
    let mpp = f32::from_bits(read_u32(&mut source, "mpp")?);

    let mut coords = vec![0u8; n * 8];
    read_exact(&mut source, &mut coords, "tile coordinates")?;
    let tile_xy = coords
        .chunks_exact(8)
        .map(|c| {
            (
                u32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                u32::from_le_bytes([c[4], c[5], c[6], c[7]]),
            )
        })
        .collect();

    let mut raw = vec![0u8; n * dim * 4];
    read_exact(&mut source, &mut raw, "features")?;
    let features = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    FeatureBag::new(slide_id, dim, tile_xy, features, mpp, tile_size_px)
}

/// Reads a bag and checks its feature dimension.
pub fn read_bag_with_dim<R: Read>(source: R, expected_dim: usize) -> Result<FeatureBag> {
    let bag = read_bag(source)?;
    if bag.dim != expected_dim {
        return Err(Error::DimMismatch { expected: expected_dim, found: bag.dim });
    }
    Ok(bag)
}

pub fn write_bag_file(bag: &FeatureBag, path: impl AsRef<Path>) -> Result<()> {
    let mut sink = BufWriter::new(File::create(path)?);
    write_bag(bag, &mut sink)?;
    sink.flush()?;
    Ok(())
}

/// Reads a whole bag file; trailing bytes after the feature block are an error.
pub fn read_bag_file(path: impl AsRef<Path>) -> Result<FeatureBag> {
    let mut source = BufReader::new(File::open(path)?);
    let bag = read_bag(&mut source)?;
    let mut rest = [0u8; 1];
    if source.read(&mut rest)? != 0 {
        return Err(Error::invalid("trailing bytes after bag features"));
    }
    Ok(bag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny() -> FeatureBag {
        FeatureBag::new("s1", 4, vec![(512, 1024)], vec![0.5, -1.25, 3.0e-7, f32::MAX], 0.25, 512).unwrap()
    }

    #[test]
    fn one_tile_round_trip_is_exact() {
        let bag = tiny();
        let mut buf = Vec::new();
        write_bag(&bag, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 2 + 2 + 2 + 16 + 8 + 16);
        let back = read_bag(&buf[..]).unwrap();
        assert_eq!(back, bag);
        let mut again = Vec::new();
        write_bag(&back, &mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn header_layout_is_little_endian() {
        let mut buf = Vec::new();
        write_bag(&tiny(), &mut buf).unwrap();
        assert_eq!(&buf[..4], b"ECTB");
        assert_eq!(&buf[4..6], &[1, 0]);
        assert_eq!(&buf[6..8], &[2, 0]);
        assert_eq!(&buf[8..10], b"s1");
        assert_eq!(&buf[10..14], &[1, 0, 0, 0]);
        assert_eq!(&buf[14..18], &[4, 0, 0, 0]);
        assert_eq!(&buf[18..22], &512u32.to_le_bytes());
        assert_eq!(&buf[22..26], &0.25f32.to_le_bytes());
        assert_eq!(&buf[26..30], &512u32.to_le_bytes());
    }

    #[test]
    fn wrong_magic() {
        let mut buf = Vec::new();
        write_bag(&tiny(), &mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_bag(&buf[..]), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_stream() {
        let mut buf = Vec::new();
        write_bag(&tiny(), &mut buf).unwrap();
        for cut in [3, 9, 20, buf.len() - 1] {
            assert!(matches!(read_bag(&buf[..cut]), Err(Error::Truncated(_))), "cut {cut}");
        }
    }

    #[test]
    fn unexpected_dimension() {
        let mut buf = Vec::new();
        write_bag(&tiny(), &mut buf).unwrap();
        assert!(matches!(
            read_bag_with_dim(&buf[..], 2048),
            Err(Error::DimMismatch { expected: 2048, found: 4 })
        ));
    }

    #[test]
    fn unknown_version() {
        let mut buf = Vec::new();
        write_bag(&tiny(), &mut buf).unwrap();
        buf[4] = 9;
        assert!(matches!(read_bag(&buf[..]), Err(Error::UnsupportedVersion(9))));
    }

    #[test]
    fn non_finite_features_rejected_on_write() {
        let mut bag = tiny();
        bag.features[1] = f32::NAN;
        assert!(matches!(write_bag(&bag, Vec::new()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn trailing_bytes_in_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ectb");
        write_bag_file(&tiny(), &path).unwrap();
        assert_eq!(read_bag_file(&path).unwrap(), tiny());
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, bytes).unwrap();
        assert!(read_bag_file(&path).is_err());
    }

    fn arb_bag() -> impl Strategy<Value = FeatureBag> {
        (1usize..6, 1usize..9, "[a-zA-Z0-9_-]{0,12}", 0.01f32..4.0, 1u32..2048).prop_flat_map(
            |(n, dim, id, mpp, tile)| {
                (
                    prop::collection::vec((any::<u32>(), any::<u32>()), n),
                    prop::collection::vec(prop::num::f32::NORMAL | prop::num::f32::ZERO | prop::num::f32::SUBNORMAL, n * dim),
                )
                    .prop_map(move |(xy, f)| FeatureBag::new(id.clone(), dim, xy, f, mpp, tile).unwrap())
            },
        )
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(bag in arb_bag()) {
            let mut buf = Vec::new();
            write_bag(&bag, &mut buf).unwrap();
            let back = read_bag(&buf[..]).unwrap();
            prop_assert_eq!(back.features.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            bag.features.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back, bag);
        }
    }
}
