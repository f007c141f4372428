//! Training-time data enhancement: mixup, stochastic spectrogram masking,
//! background noise mixed into the waveform.


