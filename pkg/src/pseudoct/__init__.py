"""Ultrasound-to-pseudo-CT synthesis toolkit.

Landmark registration, kidney ROI and field-of-view preprocessing, a
residual 3-D U-Net generator with a transformer bottleneck trained against
a conditional patch discriminator, and PSNR/SSIM evaluation, all on a small
numpy autodiff engine.
"""

__version__ = "0.1.0"
