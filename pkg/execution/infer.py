# infer.py
# Two-view inference: pad to the patch grid, run the network, crop, write predictions

from pathlib import Path

import numpy as np
import torch

from globals import PATCH_SIZE
from backbone_model import Checkpoint, build_model, load_checkpoint
from sample_io import read_png, write_prediction


def pad_to_patch_multiple(image, patch_size=PATCH_SIZE):
    """
    Zero-pad an (H, W, C) image on the right and bottom to the next patch multiple.

    Returns:
        Tuple (padded image, original (H, W))
    """
    image = np.asarray(image)
    height, width = image.shape[:2]
    pad_h = (-height) % patch_size
    pad_w = (-width) % patch_size
    if pad_h == 0 and pad_w == 0:
        return image, (height, width)
    pad = [(0, pad_h), (0, pad_w)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, pad), (height, width)


def crop_to(array, size):
    """Undo pad_to_patch_multiple on an output map (leading two axes spatial)."""
    height, width = size
    return array[:height, :width]


def load_model(checkpoint):
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    model = build_model(ckpt)
    model.eval()
    return model, ckpt


def predict_pair(model, image1, image2):
    """
    Run the network on two (H, W, 3) float images of any size.

    Returns:
        Tuple of per-view prediction dicts (float32 arrays at the input sizes)
    """
    padded1, size1 = pad_to_patch_multiple(np.asarray(image1, dtype=np.float32), model.cfg.patch_size)
    padded2, size2 = pad_to_patch_multiple(np.asarray(image2, dtype=np.float32), model.cfg.patch_size)
    with torch.no_grad():
        out1, out2 = model.forward_pair(torch.from_numpy(padded1)[None], torch.from_numpy(padded2)[None])
    views = []
    for out, size in ((out1, size1), (out2, size2)):
        views.append(out.crop(*size).to_numpy(0))
    return views[0], views[1]


def infer(checkpoint, image1, image2, out_dir):
    """
    Predict pointmaps, normals, depth and descriptors for an image pair and write
    them in the prediction format with normal and depth visualizations.

    Args:
        checkpoint: Checkpoint or checkpoint path
        image1, image2: Image arrays or PNG paths
        out_dir: Output directory

    Returns:
        Tuple of per-view prediction dicts
    """
    model, ckpt = load_model(checkpoint)
    sources = []
    images = []
    for image in (image1, image2):
        if isinstance(image, (str, Path)):
            sources.append(str(image))
            images.append(read_png(image, 'image'))
        else:
            sources.append(None)
            images.append(np.asarray(image, dtype=np.float32))

    views = predict_pair(model, images[0], images[1])
    write_prediction(list(views), out_dir, {'checkpoint_stage': ckpt.stage, 'sources': sources})
    print(f"✓ Wrote prediction for {images[0].shape[1]}x{images[0].shape[0]} and "
          f"{images[1].shape[1]}x{images[1].shape[0]} images to {out_dir}")
    return views
