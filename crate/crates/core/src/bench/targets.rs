//! Published results of the full-scale training run (500k steps, multi-GPU).
//! They document the target of a full reproduction; desk-scale runs are not
//! expected to reach them.

/// `(qf, psnr, ssim, psnr_b)` on LIVE-IQA reference images.
pub const RESTORATION: [(u32, f64, f64, f64); 4] = [
    (10, 27.25, 0.803, 26.90),
    (20, 29.60, 0.868, 29.14),
    (30, 30.94, 0.896, 30.41),
    (40, 31.86, 0.911, 31.29),
];

/// `(database, map_index, pcc, srcc, kcc)` on JPEG-distorted images.
pub const JPEG_CORRELATION: [(&str, usize, f64, f64, f64); 9] = [
    ("LIVE-IQA", 1, 0.099, 0.076, 0.051),
    ("LIVE-IQA", 2, 0.870, 0.879, 0.695),
    ("LIVE-IQA", 3, 0.267, 0.203, 0.135),
    ("CSIQ", 1, -0.233, -0.216, -0.148),
    ("CSIQ", 2, 0.859, 0.832, 0.628),
    ("CSIQ", 3, 0.446, 0.428, 0.288),
    ("TID2013", 1, 0.070, 0.118, 0.084),
    ("TID2013", 2, 0.880, 0.862, 0.658),
    ("TID2013", 3, 0.073, 0.136, 0.078),
];

/// `(database, distortion, pcc, srcc, kcc)` for the second map on other distortions.
/// The negative noise correlations mean noisier images receive higher estimates.
pub const UNSEEN_DISTORTION_CORRELATION: [(&str, &str, f64, f64, f64); 9] = [
    ("LIVE-IQA", "jpeg2000", 0.814, 0.828, 0.637),
    ("LIVE-IQA", "gaussian_blur", 0.714, 0.743, 0.557),
    ("LIVE-IQA", "white_noise", -0.895, -0.926, -0.778),
    ("CSIQ", "jpeg2000", 0.672, 0.679, 0.476),
    ("CSIQ", "gaussian_blur", 0.714, 0.767, 0.540),
    ("CSIQ", "white_noise", -0.581, -0.572, -0.403),
    ("TID2013", "jpeg2000", 0.477, 0.528, 0.348),
    ("TID2013", "gaussian_blur", 0.608, 0.654, 0.478),
    ("TID2013", "white_noise", -0.395, -0.410, -0.287),
];
