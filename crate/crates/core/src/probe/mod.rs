//! Client side of the model-probe protocol, plus an in-process frequency
//! oracle backend.

mod cache;
mod client;
mod oracle;
pub mod protocol;
mod transport;

pub use cache::{ProbeCache, CACHE_DIR_ENV};
pub use client::{
    sort_entries, BackendDescriptor, ClientOptions, NextTokenDist, ProbeClient, ProbeError,
    ProbeRequest, RetryPolicy, MASS_TOLERANCE,
};
pub use oracle::{FrequencyOracle, OracleTokenizerMismatch};
pub use transport::{HttpTransport, Transport, TransportError};

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::{Arc, Mutex};
    use std::time::Duration;

    use rayon::prelude::*;

    use super::*;
    use crate::data_tree::tests::example;
    use crate::data_tree::OccurrenceMode;

    fn oracle() -> FrequencyOracle {
        let (tok, _, tree) = example(OccurrenceMode::AnyOccurrence);
        FrequencyOracle::new("oracle", tok, [tree]).unwrap()
    }

    fn fast() -> ClientOptions {
        ClientOptions {
            retry: RetryPolicy {
                attempts: 3,
                initial_backoff: Duration::from_millis(1),
            },
            ..ClientOptions::default()
        }
    }

    fn client(t: impl Transport + 'static, opts: ClientOptions) -> ProbeClient {
        ProbeClient::connect(Arc::new(t), "oracle", opts).unwrap()
    }

    fn req(context: Vec<u32>, top_m: usize) -> ProbeRequest {
        ProbeRequest { context, top_m }
    }

    #[test]
    fn oracle_serves_exact_frequencies() {
        let c = client(oracle(), fast());
        let d = c.next_token_dist(&req(vec![0], 5)).unwrap();
        assert_eq!(d.entries.len(), 2);
        assert_eq!(d.entries[0].0, 1);
        assert!((d.entries[0].1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(d.entries[1].0, 2);
        assert!((d.entries[1].1 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(d.truncated_mass, 0.0);

        let d = c.next_token_dist(&req(vec![0], 1)).unwrap();
        assert_eq!(d.entries.len(), 1);
        assert!((d.truncated_mass - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn unobserved_context_truncates_everything() {
        let c = client(oracle(), fast());
        let d = c.next_token_dist(&req(vec![0, 2, 2], 5)).unwrap();
        assert!(d.entries.is_empty());
        assert_eq!(d.truncated_mass, 1.0);
    }

    #[test]
    fn request_validation() {
        let c = client(oracle(), fast());
        assert!(matches!(
            c.next_token_dist(&req(vec![], 5)),
            Err(ProbeError::InvalidRequest(_))
        ));
        assert!(matches!(
            c.next_token_dist(&req(vec![0], 0)),
            Err(ProbeError::InvalidRequest(_))
        ));
        // window is max_depth + 1 = 3
        assert!(matches!(
            c.next_token_dist(&req(vec![0; 4], 1)),
            Err(ProbeError::ContextTooLong { len: 4, window: 3 })
        ));
        assert!(matches!(
            c.greedy_generate(&[0], 0, &[]),
            Err(ProbeError::InvalidRequest(_))
        ));
    }

    #[test]
    fn unknown_model_is_a_protocol_error() {
        let c = ProbeClient::connect(Arc::new(oracle()), "other", fast()).unwrap();
        assert!(matches!(
            c.next_token_dist(&req(vec![0], 1)),
            Err(ProbeError::Protocol { status: 404, .. })
        ));
    }

    #[test]
    fn greedy_chain_and_stop() {
        let c = client(oracle(), fast());
        // argmax chain from [a]: b (2/3), then a (only child of b)
        assert_eq!(c.greedy_generate(&[0], 5, &[]).unwrap(), vec![1, 0]);
        assert_eq!(c.greedy_generate(&[0], 5, &[0]).unwrap(), vec![1]);
        assert_eq!(c.greedy_generate(&[0], 1, &[]).unwrap(), vec![1]);
        assert_eq!(
            c.greedy_generate(&[0], 5, &[]).unwrap(),
            c.greedy_generate(&[0], 5, &[]).unwrap()
        );
    }

    #[test]
    fn tokenize_routes() {
        let c = client(oracle(), fast());
        assert_eq!(c.tokenize("a b c").unwrap(), vec![0, 1, 2]);
        assert_eq!(c.detokenize(&[2, 0]).unwrap(), "c a");
    }

    #[test]
    fn tokenizer_guard() {
        let c = client(oracle(), fast());
        let hash = c.descriptor().tokenizer_hash.clone();
        c.descriptor().ensure_tokenizer(&hash).unwrap();
        assert!(matches!(
            c.descriptor().ensure_tokenizer("nope"),
            Err(ProbeError::TokenizerMismatch { .. })
        ));
    }

    /// Wraps a transport, counting calls and peak concurrency, optionally
    /// failing the first `fail` calls with a network error.
    struct Counting<T> {
        inner: T,
        calls: AtomicUsize,
        active: AtomicUsize,
        peak: AtomicUsize,
        fail: AtomicUsize,
        delay: Duration,
        seen: Mutex<Vec<String>>,
    }

    impl<T> Counting<T> {
        fn new(inner: T, fail: usize, delay: Duration) -> Self {
            Self {
                inner,
                calls: AtomicUsize::new(0),
                active: AtomicUsize::new(0),
                peak: AtomicUsize::new(0),
                fail: AtomicUsize::new(fail),
                delay,
                seen: Mutex::new(Vec::new()),
            }
        }
    }

    impl<T: Transport> Transport for Counting<T> {
        fn post(&self, path: &str, body: &[u8]) -> Result<Vec<u8>, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.seen.lock().unwrap().push(path.to_string());
            let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(self.delay);
            self.active.fetch_sub(1, Ordering::SeqCst);
            if self
                .fail
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |f| f.checked_sub(1))
                .is_ok()
            {
                return Err(TransportError::Network("connection reset".into()));
            }
            self.inner.post(path, body)
        }

        fn get(&self, path: &str) -> Result<Vec<u8>, TransportError> {
            self.inner.get(path)
        }

        fn endpoint(&self) -> String {
            self.inner.endpoint()
        }
    }

    impl<T: Transport> Transport for Arc<T> {
        fn post(&self, path: &str, body: &[u8]) -> Result<Vec<u8>, TransportError> {
            self.as_ref().post(path, body)
        }
        fn get(&self, path: &str) -> Result<Vec<u8>, TransportError> {
            self.as_ref().get(path)
        }
        fn endpoint(&self) -> String {
            self.as_ref().endpoint()
        }
    }

    #[test]
    fn in_flight_requests_are_bounded() {
        let counting = Arc::new(Counting::new(oracle(), 0, Duration::from_millis(5)));
        let opts = ClientOptions {
            max_in_flight: 3,
            ..fast()
        };
        let c = client(counting.clone(), opts);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(12)
            .build()
            .unwrap();
        pool.install(|| {
            (0..48).into_par_iter().for_each(|i| {
                c.next_token_dist(&req(vec![0], 1 + i % 4)).unwrap();
            })
        });
        assert_eq!(counting.calls.load(Ordering::SeqCst), 48);
        let peak = counting.peak.load(Ordering::SeqCst);
        assert!(peak <= 3, "peak {peak}");
        assert!(peak >= 2, "pool never overlapped requests");
    }

    #[test]
    fn network_failures_are_retried() {
        let counting = Arc::new(Counting::new(oracle(), 2, Duration::ZERO));
        let c = client(counting.clone(), fast());
        assert!(c.next_token_dist(&req(vec![0], 2)).is_ok());
        assert_eq!(counting.calls.load(Ordering::SeqCst), 3);

        let counting = Arc::new(Counting::new(oracle(), 3, Duration::ZERO));
        let c = client(counting.clone(), fast());
        assert!(matches!(
            c.next_token_dist(&req(vec![0], 2)),
            Err(ProbeError::Network { attempts: 3, .. })
        ));
    }

    #[test]
    fn cache_hits_skip_the_network_and_survive_restart() {
        let dir = tempfile::tempdir().unwrap();
        let opts = ClientOptions {
            cache: Some(ProbeCache::new(dir.path())),
            ..fast()
        };
        let counting = Arc::new(Counting::new(oracle(), 0, Duration::ZERO));
        let c = client(counting.clone(), opts.clone());
        let first = c.next_token_dist(&req(vec![0], 5)).unwrap();
        let second = c.next_token_dist(&req(vec![0], 5)).unwrap();
        assert_eq!(first, second);
        assert_eq!(counting.calls.load(Ordering::SeqCst), 1);
        c.next_token_dist(&req(vec![0], 4)).unwrap();
        assert_eq!(counting.calls.load(Ordering::SeqCst), 2);

        // a fresh client over the same directory
        let counting2 = Arc::new(Counting::new(oracle(), 0, Duration::ZERO));
        let c2 = client(counting2.clone(), opts);
        assert_eq!(c2.next_token_dist(&req(vec![0], 5)).unwrap(), first);
        assert_eq!(counting2.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn corrupt_cache_entry_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ProbeCache::new(dir.path());
        let key = ProbeCache::key("oracle", &[0], 5);
        cache.put(&key, b"{not json");
        let counting = Arc::new(Counting::new(oracle(), 0, Duration::ZERO));
        let c = client(
            counting.clone(),
            ClientOptions {
                cache: Some(cache.clone()),
                ..fast()
            },
        );
        let d = c.next_token_dist(&req(vec![0], 5)).unwrap();
        assert_eq!(d.entries.len(), 2);
        assert_eq!(counting.calls.load(Ordering::SeqCst), 1);
        assert!(serde_json::from_slice::<serde_json::Value>(&cache.get(&key).unwrap()).is_ok());
    }

    /// Backend returning a distribution that does not sum to one.
    struct Leaky;

    impl Transport for Leaky {
        fn post(&self, _: &str, _: &[u8]) -> Result<Vec<u8>, TransportError> {
            Ok(br#"{"entries":[{"token":1,"logprob":-1.0}],"truncated_logmass":-3.0}"#.to_vec())
        }
        fn get(&self, _: &str) -> Result<Vec<u8>, TransportError> {
            Ok(
                br#"{"model":"oracle","vocab_size":4,"context_window":8,"tokenizer_hash":"x"}"#
                    .to_vec(),
            )
        }
        fn endpoint(&self) -> String {
            "leaky".into()
        }
    }

    #[test]
    fn unnormalized_responses_are_rejected() {
        let c = client(Leaky, fast());
        assert!(matches!(
            c.next_token_dist(&req(vec![0], 1)),
            Err(ProbeError::Malformed(_))
        ));
    }
}
