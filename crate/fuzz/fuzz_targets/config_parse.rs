#![no_main]

use libfuzzer_sys::fuzz_target;
use suap_core::config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(ini) = config::parse_ini(text) else { return };
    let again = config::parse_ini(&ini.to_string()).expect("printed config parses");
    assert_eq!(again, ini);
    // typed readers must reject bad values without panicking
    let _ = config::scene_spec(&ini);
    let _ = config::detector_config(&ini);
    let _ = config::loss_weights(&ini);
    let _ = config::ao_exp_config(&ini);
    let _ = config::lora_pgd_config(&ini, 0);
    let _ = config::fw_nucl_config(&ini);
});
