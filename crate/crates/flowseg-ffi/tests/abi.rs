//! Exercises the C surface exactly as a foreign caller would: raw
//! pointers, status codes, and the thread-local error message.

use std::ffi::{c_char, CStr, CString};
use std::ptr;

use flowseg_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn last_error() -> String {
    CStr::from_ptr(fsg_last_error()).to_string_lossy().into_owned()
}

#[test]
fn version_is_a_static_utf8_string() {
    let v = unsafe { CStr::from_ptr(fsg_version()) };
    let v = v.to_str().unwrap();
    assert!(!v.is_empty());
    assert!(v.chars().next().unwrap().is_ascii_digit());
}

#[test]
fn config_set_serialize_parse_round_trip() {
    unsafe {
        let cfg = fsg_config_new();
        assert!(!cfg.is_null());
        assert_eq!(fsg_config_set(cfg, c("data.count").as_ptr(), c("24").as_ptr()), FsgStatus::Ok);
        assert_eq!(fsg_config_set(cfg, c("guidance.s").as_ptr(), c("2.5").as_ptr()), FsgStatus::Ok);
        assert_eq!(fsg_config_validate(cfg), FsgStatus::Ok);

        let text = fsg_config_serialize(cfg);
        assert!(!text.is_null());
        let owned = CStr::from_ptr(text).to_str().unwrap().to_owned();
        assert!(owned.contains("data.count = 24"));
        assert!(owned.contains("guidance.s = 2.5"));

        let reparsed = fsg_config_parse(text as *const c_char);
        assert!(!reparsed.is_null());
        let text2 = fsg_config_serialize(reparsed);
        assert_eq!(owned, CStr::from_ptr(text2).to_str().unwrap());

        fsg_string_free(text);
        fsg_string_free(text2);
        fsg_config_free(reparsed);
        fsg_config_free(cfg);
    }
}

#[test]
fn bad_keys_and_values_report_config_errors() {
    unsafe {
        let cfg = fsg_config_new();
        let st = fsg_config_set(cfg, c("no.such.key").as_ptr(), c("1").as_ptr());
        assert_eq!(st, FsgStatus::Config);
        assert!(last_error().contains("no.such.key"), "got: {}", last_error());

        let st = fsg_config_set(cfg, c("data.count").as_ptr(), c("many").as_ptr());
        assert_eq!(st, FsgStatus::Config);

        // Window longer than the trajectory: caught by validate, not set.
        assert_eq!(
            fsg_config_set(cfg, c("guidance.tau").as_ptr(), c("99").as_ptr()),
            FsgStatus::Ok
        );
        assert_eq!(fsg_config_validate(cfg), FsgStatus::Config);
        fsg_config_free(cfg);

        let parsed = fsg_config_parse(c("data.count = 5\ndata.count = 6\n").as_ptr());
        assert!(parsed.is_null());
        assert!(last_error().contains("duplicate"));
    }
}

#[test]
fn null_arguments_are_flagged_not_crashed() {
    unsafe {
        assert_eq!(
            fsg_config_set(ptr::null_mut(), c("seed").as_ptr(), c("1").as_ptr()),
            FsgStatus::NullArgument
        );
        let mut out = 0.0f64;
        assert_eq!(fsg_dice(ptr::null(), ptr::null(), &mut out), FsgStatus::NullArgument);
        assert!(!last_error().is_empty());
        assert!(fsg_config_parse(ptr::null()).is_null());
        assert_eq!(fsg_volume_len(ptr::null()), 0);
        assert!(fsg_volume_data(ptr::null()).is_null());
        // Frees ignore null.
        fsg_config_free(ptr::null_mut());
        fsg_volume_free(ptr::null_mut());
        fsg_models_free(ptr::null_mut());
        fsg_string_free(ptr::null_mut());
    }
}

#[test]
fn volumes_round_trip_through_create_write_read() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.fsvl");
    let cpath = c(path.to_str().unwrap());
    unsafe {
        let dims = [2usize, 3, 4];
        let spacing = [1.0f32, 0.8, 1.5];
        let values: Vec<f32> = (0..24).map(|i| i as f32 * 0.5 - 3.0).collect();
        let vol = fsg_volume_create(dims.as_ptr(), spacing.as_ptr(), values.as_ptr(), 24);
        assert!(!vol.is_null());
        assert_eq!(fsg_volume_write(vol, cpath.as_ptr()), FsgStatus::Ok);

        let back = fsg_volume_read(cpath.as_ptr());
        assert!(!back.is_null());
        let mut d = [0usize; 3];
        let mut s = [0.0f32; 3];
        assert_eq!(fsg_volume_dims(back, d.as_mut_ptr()), FsgStatus::Ok);
        assert_eq!(fsg_volume_spacing(back, s.as_mut_ptr()), FsgStatus::Ok);
        assert_eq!(d, dims);
        assert_eq!(s, spacing);
        assert_eq!(fsg_volume_len(back), 24);
        let data = std::slice::from_raw_parts(fsg_volume_data(back), 24);
        assert_eq!(data, &values[..]);

        // Mismatched voxel count must fail cleanly.
        let bad = fsg_volume_create(dims.as_ptr(), spacing.as_ptr(), values.as_ptr(), 23);
        assert!(bad.is_null());
        assert!(!last_error().is_empty());

        fsg_volume_free(vol);
        fsg_volume_free(back);
    }
}

#[test]
fn metrics_match_their_definitions_at_the_boundary() {
    unsafe {
        let dims = [4usize, 4, 4];
        let spacing = [1.0f32, 1.0, 1.0];
        let mut a = vec![0.0f32; 64];
        let mut b = vec![0.0f32; 64];
        for i in 0..8 {
            a[i] = 1.0;
            b[i] = 1.0;
        }
        b[8] = 1.0; // |A|=8, |B|=9, |A∩B|=8
        let va = fsg_volume_create(dims.as_ptr(), spacing.as_ptr(), a.as_ptr(), 64);
        let vb = fsg_volume_create(dims.as_ptr(), spacing.as_ptr(), b.as_ptr(), 64);
        let mut d = 0.0f64;
        assert_eq!(fsg_dice(va, vb, &mut d), FsgStatus::Ok);
        assert!((d - 16.0 / 17.0).abs() < 1e-12);

        let mut m = -1.0f64;
        assert_eq!(fsg_mean_surface_distance(va, va, &mut m), FsgStatus::Ok);
        assert_eq!(m, 0.0);

        fsg_volume_free(va);
        fsg_volume_free(vb);
    }
}

/// The whole pipeline through the C ABI on a tiny identity-latent corpus,
/// ending in an in-memory segmentation of one of its own volumes.
#[test]
fn micro_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "out = {}\n\
         seed = 11\n\
         data.count = 6\n\
         data.dims = 16,16,16\n\
         data.nodule_min = 1\n\
         data.nodule_max = 1\n\
         data.radius_min_mm = 1\n\
         data.radius_max_mm = 1.5\n\
         data.lobed_p = 0\n\
         folds.k = 2\n\
         ae.identity = true\n\
         flow.t_steps = 4\n\
         flow.steps = 2\n\
         flow.batch = 1\n\
         guidance.tau = 2\n\
         guidance.m = 1\n\
         predictor.iterations = 4\n\
         predictor.eval_every = 2\n\
         predictor.batch = 1\n\
         predictor.slab_k = 3\n",
        dir.path().display()
    );
    unsafe {
        let cfg = fsg_config_parse(c(&text).as_ptr());
        assert!(!cfg.is_null(), "{}", last_error());

        let mut count = 0usize;
        assert_eq!(fsg_gen_data(cfg, &mut count), FsgStatus::Ok, "{}", last_error());
        assert_eq!(count, 6);

        for fold in 0..2 {
            let mut mse = f32::NAN;
            assert_eq!(fsg_train_ae(cfg, fold, &mut mse), FsgStatus::Ok, "{}", last_error());
            assert_eq!(mse, 0.0, "identity latents reconstruct exactly");
            let (mut first, mut last) = (f64::NAN, f64::NAN);
            assert_eq!(
                fsg_train_flow(cfg, fold, &mut first, &mut last),
                FsgStatus::Ok,
                "{}",
                last_error()
            );
            assert!(first.is_finite() && last.is_finite());
            let mut f1 = f32::NAN;
            assert_eq!(fsg_train_predictor(cfg, fold, &mut f1), FsgStatus::Ok, "{}", last_error());
            assert!((0.0..=1.0).contains(&f1));
        }

        let mut segged = 0usize;
        assert_eq!(
            fsg_segment(cfg, c("tfg").as_ptr(), -1, -1, 2, &mut segged),
            FsgStatus::Ok,
            "{}",
            last_error()
        );
        assert_eq!(segged, 6);
        assert_eq!(
            fsg_segment(cfg, c("cam").as_ptr(), -1, -1, 2, ptr::null_mut()),
            FsgStatus::Ok,
            "{}",
            last_error()
        );

        let mut table: *mut c_char = ptr::null_mut();
        assert_eq!(
            fsg_eval(cfg, c("tfg,cam").as_ptr(), 2, &mut table),
            FsgStatus::Ok,
            "{}",
            last_error()
        );
        let rendered = CStr::from_ptr(table).to_str().unwrap().to_owned();
        assert!(rendered.contains("tfg") && rendered.contains("cam"), "table: {rendered}");
        fsg_string_free(table);

        // In-memory segmentation against fold 0's models.
        let models = fsg_models_load(cfg, 0);
        assert!(!models.is_null(), "{}", last_error());
        let vol = fsg_volume_read(c(&format!("{}/volumes/vol_000.fsvl", dir.path().display())).as_ptr());
        assert!(!vol.is_null(), "{}", last_error());

        let mut mask: *mut FsgVolume = ptr::null_mut();
        let mut counter: *mut FsgVolume = ptr::null_mut();
        let mut skipped = false;
        assert_eq!(
            fsg_tfg_segment(models, vol, cfg, &mut mask, &mut counter, ptr::null_mut(), &mut skipped),
            FsgStatus::Ok,
            "{}",
            last_error()
        );
        assert!(!mask.is_null() && !counter.is_null());
        let mut d = [0usize; 3];
        assert_eq!(fsg_volume_dims(mask, d.as_mut_ptr()), FsgStatus::Ok);
        assert_eq!(d, [16, 16, 16]);
        let data = std::slice::from_raw_parts(fsg_volume_data(mask), fsg_volume_len(mask));
        assert!(data.iter().all(|&v| v == 0.0 || v == 1.0));

        // Loading a fold that was never trained names the missing piece.
        assert!(fsg_models_load(cfg, 7).is_null());
        assert_eq!(
            fsg_segment(cfg, c("nope").as_ptr(), -1, -1, 1, ptr::null_mut()),
            FsgStatus::Config
        );

        fsg_volume_free(mask);
        fsg_volume_free(counter);
        fsg_volume_free(vol);
        fsg_models_free(models);
        fsg_config_free(cfg);
    }
}
