//! Named-tensor checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "UPGN"  magic, 4 bytes
//! u32     format version (currently 1)
//! u64     entry count
//! entry*  u32 name length, UTF-8 name,
//!         u32 rank, u64 dim per axis,
//!         row-major payload of 32-bit IEEE-754 floats
//! ```
//!
//! Entries are written in sorted name order, so serializing the same store
//! twice yields identical bytes.

use std::io::{Read, Write};

use super::{AutodiffError, ParameterStore, Tensor};

pub const ARCHIVE_MAGIC: [u8; 4] = *b"UPGN";
pub const ARCHIVE_VERSION: u32 = 1;

pub fn write_archive(store: &ParameterStore, w: &mut impl Write) -> Result<(), AutodiffError> {
    w.write_all(&ARCHIVE_MAGIC)?;
    w.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
    let count = store.names().count() as u64;
    w.write_all(&count.to_le_bytes())?;
    for (name, param) in store.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        let dims = param.value.dims();
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for &d in dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in param.value.data() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn archive_to_bytes(store: &ParameterStore) -> Vec<u8> {
    let mut buf = Vec::new();
    write_archive(store, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

pub fn read_archive(r: &mut impl Read) -> Result<ParameterStore, AutodiffError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != ARCHIVE_MAGIC {
        return Err(AutodiffError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != ARCHIVE_VERSION {
        return Err(AutodiffError::BadVersion(version));
    }
    let count = read_u64(r)?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| AutodiffError::BadEntry("name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > 2 {
            return Err(AutodiffError::BadEntry(format!("{name}: unsupported rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(r)? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 4];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        store.insert(name, Tensor::from_vec(dims, data));
    }
    Ok(store)
}

fn read_u32(r: &mut impl Read) -> Result<u32, AutodiffError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, AutodiffError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_tensor_archive_is_bit_exact() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::from_vec(vec![1, 2], vec![1.0, -0.5]));
        let bytes = archive_to_bytes(&store);

        let mut expected = Vec::new();
        expected.extend_from_slice(b"UPGN");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(b"w");
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-0.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip_preserves_names_dims_values() {
        let mut store = ParameterStore::new();
        store.insert("b.bias", Tensor::from_vec(vec![3], vec![0.25, -1.0, 7.5]));
        store.insert("a.weight", Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let bytes = archive_to_bytes(&store);
        let loaded = read_archive(&mut bytes.as_slice()).unwrap();
        assert_eq!(loaded.names().collect::<Vec<_>>(), vec!["a.weight", "b.bias"]);
        assert_eq!(loaded.value("a.weight").dims(), &[2, 2]);
        assert_eq!(loaded.value("b.bias").data(), &[0.25, -1.0, 7.5]);
        // Serializing the loaded store reproduces the same bytes.
        assert_eq!(archive_to_bytes(&loaded), bytes);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let bytes = b"NOPE\x01\x00\x00\x00";
        assert!(matches!(
            read_archive(&mut bytes.as_slice()),
            Err(AutodiffError::BadMagic)
        ));
    }

    #[test]
    fn truncated_archive_is_an_io_error() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::from_vec(vec![4], vec![1.0; 4]));
        let bytes = archive_to_bytes(&store);
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            read_archive(&mut &cut[..]),
            Err(AutodiffError::Io(_))
        ));
    }
}
