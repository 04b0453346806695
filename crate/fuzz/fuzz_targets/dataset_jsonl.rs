#![no_main]

use cwbc::data::OfflineDataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ds) = OfflineDataset::from_jsonl_str(text) {
        let again = OfflineDataset::from_jsonl_str(&ds.to_jsonl()).expect("serialized dataset parses");
        assert_eq!(again, ds);
    }
});
