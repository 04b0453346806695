#![no_main]

use cwbc::policy::RvsPolicy;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(policy) = RvsPolicy::from_json(text) {
        let state = vec![0.0; policy.state_dim()];
        let _ = policy.predict_action(&state, 1.0);
        let again = RvsPolicy::from_json(&policy.to_json(None)).expect("serialized policy parses");
        assert_eq!(again, policy);
    }
});
