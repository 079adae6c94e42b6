from .field import (D_MAX, D_MIN, LATENT_DIM, GaussianSet, decode_latent, decode_set, fuse_multiview,
                    fuse_views, gru_update, match_primitives, predict_depth, regress_gaussians)
from .metrics import PSNR_CAP, psnr, ssim
from .render import SH_C0, project_footprints, render, render_loss, sh_basis, sh_colors

__all__ = [
    "D_MAX", "D_MIN", "LATENT_DIM", "GaussianSet", "decode_latent", "decode_set", "fuse_multiview",
    "fuse_views", "gru_update", "match_primitives", "predict_depth", "regress_gaussians",
    "PSNR_CAP", "psnr", "ssim", "SH_C0", "project_footprints", "render", "render_loss",
    "sh_basis", "sh_colors",
]
