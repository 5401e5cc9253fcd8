"""Binary file formats and small text/image output helpers.

All multi-byte integers are little-endian; all float payloads are
float32 little-endian. Four formats live here so that the data,
encoder and model modules stay free of mutual imports:

  EMBD  precomputed embeddings   (image_id, tokens, cls) records
  EPIS  image shard              images + episode metadata
  PAIR  conditioning/target list (cond_id, target_id, similarity, episode_id)
  SEMC  model checkpoint         config text blob + named float32 arrays
"""

from __future__ import annotations

import struct

import numpy as np

NUISANCE_DIM = 5  # dx, dy, scale, rotation, noise level


class FormatError(ValueError):
    """Raised on a bad magic number, version, or truncated payload."""


def _read_exact(f, n):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError("truncated file")
    return buf


# ---------------------------------------------------------------------------
# EMBD: precomputed embeddings


def write_embeddings(path, records, t_c, d_c):
    """Write (image_id, tokens[T_c,D_c], cls[D_c]) records to an EMBD file."""
    with open(path, "wb") as f:
        f.write(b"EMBD")
        f.write(struct.pack("<IQII", 1, len(records), t_c, d_c))
        for image_id, tokens, cls in records:
            tokens = np.ascontiguousarray(tokens, dtype="<f4")
            cls = np.ascontiguousarray(cls, dtype="<f4")
            if tokens.shape != (t_c, d_c) or cls.shape != (d_c,):
                raise ValueError(f"record {image_id} has wrong embedding dims")
            f.write(struct.pack("<Q", image_id))
            f.write(tokens.tobytes())
            f.write(cls.tobytes())


def read_embeddings(path):
    """Read an EMBD file. Returns (records, t_c, d_c) preserving record order."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != b"EMBD":
            raise FormatError("not an EMBD file")
        version, n, t_c, d_c = struct.unpack("<IQII", _read_exact(f, 20))
        if version != 1:
            raise FormatError(f"unsupported EMBD version {version}")
        records = []
        for _ in range(n):
            (image_id,) = struct.unpack("<Q", _read_exact(f, 8))
            tokens = np.frombuffer(_read_exact(f, 4 * t_c * d_c), dtype="<f4")
            cls = np.frombuffer(_read_exact(f, 4 * d_c), dtype="<f4")
            records.append((image_id, tokens.reshape(t_c, d_c).copy(), cls.copy()))
    return records, t_c, d_c


# ---------------------------------------------------------------------------
# EPIS: synthetic episode shard


def write_shard(path, images, episodes):
    """Write an EPIS shard.

    images: float32 [N, H, W, C]; episodes: list of dicts with keys
    episode_id, class_id, hue, member_ids, nuisances ([m, NUISANCE_DIM]).
    """
    images = np.ascontiguousarray(images, dtype="<f4")
    if images.ndim != 4:
        raise ValueError("images must be [N, H, W, C]")
    n, h, w, c = images.shape
    with open(path, "wb") as f:
        f.write(b"EPIS")
        f.write(struct.pack("<IQIII", 1, n, h, w, c))
        f.write(images.tobytes())
        f.write(struct.pack("<Q", len(episodes)))
        for ep in episodes:
            member_ids = list(ep["member_ids"])
            nuis = np.ascontiguousarray(ep["nuisances"], dtype="<f4")
            if nuis.shape != (len(member_ids), NUISANCE_DIM):
                raise ValueError("nuisance block has wrong shape")
            f.write(struct.pack("<QIfI", ep["episode_id"], ep["class_id"], ep["hue"], len(member_ids)))
            f.write(np.asarray(member_ids, dtype="<u8").tobytes())
            f.write(nuis.tobytes())


def read_shard(path):
    """Read an EPIS shard. Returns (images [N,H,W,C] float32, episodes)."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != b"EPIS":
            raise FormatError("not an EPIS file")
        version, n, h, w, c = struct.unpack("<IQIII", _read_exact(f, 24))
        if version != 1:
            raise FormatError(f"unsupported EPIS version {version}")
        images = np.frombuffer(_read_exact(f, 4 * n * h * w * c), dtype="<f4")
        images = images.reshape(n, h, w, c).copy()
        (n_ep,) = struct.unpack("<Q", _read_exact(f, 8))
        episodes = []
        for _ in range(n_ep):
            episode_id, class_id, hue, m = struct.unpack("<QIfI", _read_exact(f, 20))
            member_ids = np.frombuffer(_read_exact(f, 8 * m), dtype="<u8").tolist()
            nuis = np.frombuffer(_read_exact(f, 4 * m * NUISANCE_DIM), dtype="<f4")
            episodes.append(
                {
                    "episode_id": episode_id,
                    "class_id": class_id,
                    "hue": hue,
                    "member_ids": member_ids,
                    "nuisances": nuis.reshape(m, NUISANCE_DIM).copy(),
                }
            )
    return images, episodes


# ---------------------------------------------------------------------------
# PAIR: filtered conditioning/target pairs


def write_pairs(path, pairs):
    """Write PairRecord-like tuples (cond_id, target_id, similarity, episode_id)."""
    with open(path, "wb") as f:
        f.write(b"PAIR")
        f.write(struct.pack("<Q", len(pairs)))
        for cond_id, target_id, similarity, episode_id in pairs:
            f.write(struct.pack("<QQfQ", cond_id, target_id, similarity, episode_id))


def read_pairs(path):
    with open(path, "rb") as f:
        if _read_exact(f, 4) != b"PAIR":
            raise FormatError("not a PAIR file")
        (n,) = struct.unpack("<Q", _read_exact(f, 8))
        return [struct.unpack("<QQfQ", _read_exact(f, 28)) for _ in range(n)]


# ---------------------------------------------------------------------------
# SEMC: checkpoint (config text blob + named arrays; EMA under "ema/")


def write_checkpoint(path, config_text, params, ema_params=None):
    """Write named float32 arrays; ema_params are stored under "ema/<name>"."""
    with open(path, "wb") as f:
        f.write(b"SEMC")
        f.write(struct.pack("<I", 1))
        blob = config_text.encode("utf-8")
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        items = list(params.items())
        if ema_params is not None:
            items += [("ema/" + k, v) for k, v in ema_params.items()]
        for name, arr in items:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            name_b = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def read_checkpoint(path):
    """Read a SEMC file. Returns (config_text, params, ema_params)."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != b"SEMC":
            raise FormatError("not a SEMC file")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != 1:
            raise FormatError(f"unsupported SEMC version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(f, 4))
        config_text = _read_exact(f, blob_len).decode("utf-8")
        params, ema = {}, {}
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise FormatError("truncated checkpoint entry")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4))
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4").reshape(shape).copy()
            if name.startswith("ema/"):
                ema[name[4:]] = arr
            else:
                params[name] = arr
    return config_text, params, (ema or None)


# ---------------------------------------------------------------------------
# plain-text key=value config files


def write_kv(path, mapping):
    with open(path, "w") as f:
        for k in mapping:
            f.write(f"{k}={mapping[k]}\n")


def read_kv(path):
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"bad config line: {line!r}")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def kv_text(mapping):
    return "".join(f"{k}={mapping[k]}\n" for k in mapping)


# ---------------------------------------------------------------------------
# PNG grids (conditioning image leftmost, samples to its right)


def to_uint8(img):
    """Map a [-1, 1] float image to uint8."""
    arr = np.clip((np.asarray(img) + 1.0) * 127.5, 0.0, 255.0)
    return arr.astype(np.uint8)


def write_png_grid(path, images, cols=None, upscale=8, pad=2):
    """Tile [-1,1] float images [n,H,W,C] into one PNG, row-major."""
    from PIL import Image

    images = np.asarray(images)
    n, h, w, c = images.shape
    if cols is None:
        cols = n
    rows = (n + cols - 1) // cols
    hh, ww = h * upscale, w * upscale
    canvas = np.full(
        (rows * hh + (rows + 1) * pad, cols * ww + (cols + 1) * pad, 3), 32, dtype=np.uint8
    )
    for i in range(n):
        r, col = divmod(i, cols)
        tile = to_uint8(images[i])
        if c == 1:
            tile = np.repeat(tile, 3, axis=-1)
        tile = np.repeat(np.repeat(tile, upscale, axis=0), upscale, axis=1)
        y = pad + r * (hh + pad)
        x = pad + col * (ww + pad)
        canvas[y : y + hh, x : x + ww] = tile
    Image.fromarray(canvas).save(path, format="PNG")
