//! JSON bodies shared by the prediction service and its client.
//!
//! Images travel as base64 of little-endian `f32`s, already normalized, so a
//! remote teacher sees exactly the bits a local one would.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const API_KEY_HEADER: &str = "X-Api-Key";
pub const REQUEST_ID_HEADER: &str = "X-Request-Id";
pub const MAX_BATCH: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub shape: Vec<usize>,
    pub data_b64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub labels: Vec<usize>,
    pub remaining_budget: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetResponse {
    pub remaining_budget: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BudgetExhausted,
    BadRequest,
    Unauthorized,
    PayloadTooLarge,
    Internal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorCode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remaining_budget: Option<usize>,
}

impl PredictRequest {
    pub fn encode(images: &Tensor) -> Self {
        let mut bytes = Vec::with_capacity(images.len() * 4);
        for v in images.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            shape: images.shape().to_vec(),
            data_b64: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Tensor> {
        let bytes = STANDARD
            .decode(&self.data_b64)
            .map_err(|e| Error::Protocol(format!("data_b64: {e}")))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Protocol(format!("{} payload bytes is not a whole number of f32s", bytes.len())));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(&self.shape, data).map_err(|e| Error::Protocol(e.to_string()))
    }

    /// FNV-1a over shape and payload, to tell a replayed request from a
    /// different one reusing its id.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |b: &[u8]| {
            for &x in b {
                h ^= x as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for d in &self.shape {
            feed(&(*d as u64).to_le_bytes());
        }
        feed(self.data_b64.as_bytes());
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;

    #[test]
    fn encode_decode_is_bit_exact() {
        let mut x = SeededRng::new(1, "wire").gaussian(&[2, 1, 3, 3]);
        x.data_mut()[0] = -0.0;
        x.data_mut()[1] = f32::MIN_POSITIVE / 2.0;
        let back = PredictRequest::encode(&x).decode().unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x), bits(&back));
        assert_eq!(back.shape(), x.shape());
    }

    #[test]
    fn decode_rejects_bad_payloads() {
        let mut r = PredictRequest::encode(&Tensor::zeros(&[1, 1, 2, 2]));
        r.shape = vec![1, 1, 2, 3];
        assert!(r.decode().is_err());
        r.data_b64 = "!!".into();
        assert!(r.decode().is_err());
    }

    #[test]
    fn error_codes_serialize_as_snake_case() {
        let body = ErrorBody {
            error: ErrorCode::BudgetExhausted,
            detail: None,
            remaining_budget: Some(3),
        };
        assert_eq!(
            serde_json::to_string(&body).unwrap(),
            r#"{"error":"budget_exhausted","remaining_budget":3}"#
        );
    }
}
