//! Flat binary parameter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "GEMNET01"
//! seed       u64       seed the network was initialised from
//! layers     u32       number of layer sizes L
//! sizes      L x u32
//! activation u8        bit 0: tanh output, bit 1: linear hidden layers
//! count      u64       number of parameters P
//! params     P x f64   layer by layer, weights (row-major, out x in) then biases
//! ```
//!
//! Several networks may be written back to back into one stream.

use std::io::{Read, Write};

use super::{Mlp, NetError, OutputActivation};

pub const PARAM_MAGIC: &[u8; 8] = b"GEMNET01";

fn io_err(e: std::io::Error) -> NetError {
    NetError::Format(e.to_string())
}

pub fn save_params<W: Write>(net: &Mlp, seed: u64, w: &mut W) -> Result<(), NetError> {
    let mut buf = Vec::with_capacity(32 + 4 * net.sizes().len() + 8 * net.num_params());
    buf.extend_from_slice(PARAM_MAGIC);
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(&(net.sizes().len() as u32).to_le_bytes());
    for &s in net.sizes() {
        buf.extend_from_slice(&(s as u32).to_le_bytes());
    }
    let mut flags = 0u8;
    if net.output_activation() == OutputActivation::Tanh {
        flags |= 1;
    }
    if net.is_linear() {
        flags |= 2;
    }
    buf.push(flags);
    buf.extend_from_slice(&(net.num_params() as u64).to_le_bytes());
    for p in net.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf).map_err(io_err)
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], NetError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(b)
}

/// Read one network; returns it with its recorded seed.
pub fn load_params<R: Read>(r: &mut R) -> Result<(Mlp, u64), NetError> {
    let magic: [u8; 8] = read_array(r)?;
    if &magic != PARAM_MAGIC {
        return Err(NetError::Format(format!("bad magic {magic:?}")));
    }
    let seed = u64::from_le_bytes(read_array(r)?);
    let layers = u32::from_le_bytes(read_array(r)?) as usize;
    if layers > 1024 {
        return Err(NetError::Format(format!("implausible layer count {layers}")));
    }
    let sizes = (0..layers)
        .map(|_| read_array::<4, _>(r).map(|b| u32::from_le_bytes(b) as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let [flags] = read_array::<1, _>(r)?;
    if flags > 3 {
        return Err(NetError::Format(format!("unknown activation flags {flags}")));
    }
    let output = if flags & 1 == 1 {
        OutputActivation::Tanh
    } else {
        OutputActivation::Identity
    };
    let count = u64::from_le_bytes(read_array(r)?) as usize;
    let expected = Mlp::zeros(&sizes, output)?.num_params();
    if count != expected {
        return Err(NetError::ParamCount { expected, got: count });
    }
    let mut raw = vec![0u8; 8 * count];
    r.read_exact(&mut raw).map_err(io_err)?;
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut net = Mlp::from_params(&sizes, output, params)?;
    if flags & 2 == 2 {
        net = net.linear();
    }
    Ok((net, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Mlp::new(&[4, 8, 2], OutputActivation::Tanh, &mut rng).unwrap();
        let b = Mlp::new(&[3, 1], OutputActivation::Identity, &mut rng).unwrap().linear();
        let mut buf = Vec::new();
        save_params(&a, 11, &mut buf).unwrap();
        save_params(&b, 12, &mut buf).unwrap();
        let mut cursor = buf.as_slice();
        let (a2, s1) = load_params(&mut cursor).unwrap();
        let (b2, s2) = load_params(&mut cursor).unwrap();
        assert_eq!((a2, s1), (a, 11));
        assert_eq!((b2, s2), (b, 12));
        assert!(cursor.is_empty());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let net = Mlp::zeros(&[2, 2], OutputActivation::Identity).unwrap();
        let mut buf = Vec::new();
        save_params(&net, 0, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(load_params(&mut bad.as_slice()), Err(NetError::Format(_))));
        let truncated = &buf[..buf.len() - 3];
        assert!(load_params(&mut &truncated[..]).is_err());
    }
}
