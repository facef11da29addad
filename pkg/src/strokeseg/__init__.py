"""Multi-sequence ischaemic stroke lesion segmentation with adversarial and boundary-weighted training."""

__version__ = "0.1.0"
