"""Patient-independent EEG seizure prediction toolkit.

Covers EDF ingestion, MFCC featurization, a small numpy autodiff engine with
the two multitask models (combined-loss CNN and Siamese), cross-validated
training, transfer to patient-specific models, channel Shapley attribution
and KL-divergence biomarker maps.
"""

__version__ = "0.1.0"
