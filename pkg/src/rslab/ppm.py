"""Binary PPM (P6) heatmap rendering with a fixed 256-entry color table.

PPM needs no imaging dependency and is byte-stable, so heatmaps can be
checked bit-for-bit. Values are mapped linearly onto the table between
vmin and vmax; out-of-range values clamp and the writer reports whether
clamping happened so callers can flag it.
"""
from __future__ import annotations

import numpy as np

# 256 perceptually-ordered RGB triples, dark blue -> green -> yellow.
_COLOR_HEX = (
    "44015444025645045745055946075a46085c460a5d460b5e470d60470e6147106347116447136548146748166848"
    "176948186a481a6c481b6d481c6e481d6f481f70482071482173482374482475482576482677482878482979472a"
    "7a472c7a472d7b472e7c472f7d46307e46327e46337f463480453581453781453882443983443a83443b84433d84"
    "433e85423f854240864241864142874144874045884046883f47883f48893e49893e4a893e4c8a3d4d8a3d4e8a3c"
    "4f8a3c508b3b518b3b528b3a538b3a548c39558c39568c38588c38598c375a8c375b8d365c8d365d8d355e8d355f"
    "8d34608d34618d33628d33638d32648e32658e31668e31678e31688e30698e306a8e2f6b8e2f6c8e2e6d8e2e6e8e"
    "2e6f8e2d708e2d718e2c718e2c728e2c738e2b748e2b758e2a768e2a778e2a788e29798e297a8e297b8e287c8e28"
    "7d8e277e8e277f8e27808e26818e26828e26828e25838e25848e25858e24868e24878e23888e23898e238a8d228b"
    "8d228c8d228d8d218e8d218f8d21908d21918c20928c20928c20938c1f948c1f958b1f968b1f978b1f988b1f998a"
    "1f9a8a1e9b8a1e9c891e9d891f9e891f9f881fa0881fa1881fa1871fa28720a38620a48621a58521a68522a78522"
    "a88423a98324aa8325ab8225ac8226ad8127ad8128ae8029af7f2ab07f2cb17e2db27d2eb37c2fb47c31b57b32b6"
    "7a34b67935b77937b87838b9773aba763bbb753dbc743fbc7340bd7242be7144bf7046c06f48c16e4ac16d4cc26c"
    "4ec36b50c46a52c56954c56856c66758c7655ac8645cc8635ec96260ca6063cb5f65cb5e67cc5c69cd5b6ccd5a6e"
    "ce5870cf5773d05675d05477d1537ad1517cd2507fd34e81d34d84d44b86d54989d5488bd6468ed64590d74393d7"
    "4195d84098d83e9bd93c9dd93ba0da39a2da37a5db36a8db34aadc32addc30b0dd2fb2dd2db5de2bb8de29bade28"
    "bddf26c0df25c2df23c5e021c8e020cae11fcde11dd0e11cd2e21bd5e21ad8e219dae319dde318dfe318e2e418e5"
    "e419e7e419eae51aece51befe51cf1e51df4e61ef6e620f8e621fbe723fde725"
)

COLOR_TABLE = np.frombuffer(bytes.fromhex(_COLOR_HEX), dtype=np.uint8).reshape(256, 3)


def write_heatmap(path, values, vmin: float, vmax: float, scale: int = 8) -> bool:
    """Render a value grid to a P6 PPM file; returns True if values clamped.

    Each cell becomes a scale x scale pixel block. NaN cells render black.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"heatmap needs a 2-d grid, got shape {values.shape}")
    finite = values[np.isfinite(values)]
    clamped = bool(
        finite.size and (finite.min() < vmin - 1e-12 or finite.max() > vmax + 1e-12)
    )
    span = vmax - vmin if vmax > vmin else 1.0
    idx = np.clip((values - vmin) / span, 0.0, 1.0)
    idx = np.nan_to_num(idx, nan=0.0)
    pixels = COLOR_TABLE[(idx * 255).round().astype(np.uint8)]
    pixels[~np.isfinite(values)] = 0
    if scale > 1:
        pixels = np.repeat(np.repeat(pixels, scale, axis=0), scale, axis=1)
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    return clamped
