"""Time-tag generation, coincidence histograms and source estimators."""

from .correlate import CoincidenceHistogram, build_histogram, pair_delays, read_histogram_csv
from .estimators import (BetaFit, PeakAreas, g2_zero, g2_zero_error, locate_peak, on_fraction_beta,
                         pair_probability_epsilon, peak_areas, window_sum)
from .lifetime import FitError, LifetimeFit, exp_gauss_cdf, fit_lifetime, start_stop_histogram
from .setups import as_stream, cross, hbt, single_arm
from .timetags import (OUTCOME_CODES, DetectorParams, TimeTagStream, apply_dead_time, detect, read_ttag,
                       write_ttag)

__all__ = [
    "BetaFit", "CoincidenceHistogram", "DetectorParams", "FitError", "LifetimeFit", "OUTCOME_CODES",
    "PeakAreas", "TimeTagStream", "apply_dead_time", "as_stream", "build_histogram", "cross", "detect",
    "exp_gauss_cdf", "fit_lifetime", "g2_zero", "g2_zero_error", "hbt", "locate_peak", "on_fraction_beta",
    "pair_delays", "pair_probability_epsilon", "peak_areas", "read_histogram_csv", "read_ttag",
    "single_arm", "start_stop_histogram", "window_sum", "write_ttag",
]
