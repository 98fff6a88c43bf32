#!/usr/bin/env python3
"""
Self-describing checkpoint container.

A container is a ZIP archive with fixed timestamps holding
 - header.yaml: format_version, kind, env_spec, architecture, metadata, digest
 - params.pt:   torch.save'd mapping {name: state_dict}
 - optional extra members (e.g. records.npz for replay snapshots)

The parameter digest in the header is re-computed on load, so a
successful load guarantees bit-identical parameters.
"""
import io
import os
import zipfile

import numpy as np
import torch
import yaml

from PixelEnvironments import EnvSpec, EnvSpecMismatch
from TorchUtils import parameter_digest

__all__ = [
    "FORMAT_VERSION", "ContainerFormatError", "Container",
    "write_container", "read_container", "save_arrays", "load_arrays"
]

FORMAT_VERSION = 1
# Fixed ZIP member timestamp so that identical content yields identical files
_ZIP_DATE_TIME = (2020, 1, 1, 0, 0, 0)

class ContainerFormatError(Exception):
    """Raised when a container file is malformed, of the wrong kind or corrupted"""
    pass

class Container(object):
    def __init__(self, kind, header, params, extras=None):
        self.kind = kind
        self.header = header
        self.params = params
        self.extras = extras or {}

    @property
    def env_spec(self):
        return self.header.get("env_spec")

    @property
    def metadata(self):
        return self.header.get("metadata", {})

    @property
    def architecture(self):
        return self.header.get("architecture", {})

    def __str__(self):
        return f"Container({self.kind}, {sorted(self.params.keys())})"

    def __repr__(self) -> str:
        return self.__str__()

def _writestr(archive, name, data):
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE_TIME)
    info.compress_type = zipfile.ZIP_DEFLATED
    archive.writestr(info, data)

def write_container(filename, kind, params: dict, env_spec=None, architecture=None, metadata=None, extras: dict = None):
    """
    Write a container.

    Args:
        filename: target path (parent directories are created)
        kind: container kind, e.g. "victim", "attack", "critic", "world_model", "replay"
        params: {name: state_dict}
        env_spec: EnvSpec (namedtuple) or dict
        architecture: JSON/YAML-serializable architecture descriptor
        metadata: extra YAML-serializable header fields
        extras: {member name: bytes}
    Returns:
        the parameter digest
    """
    params = {name: {key: value.detach().cpu() for key, value in state.items()} for name, state in params.items()}
    digest = parameter_digest(*[params[name] for name in sorted(params)])
    if env_spec is not None and hasattr(env_spec, "_asdict"):
        env_spec = dict(env_spec._asdict())
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "env_spec": env_spec,
        "architecture": architecture or {},
        "metadata": metadata or {},
        "param_names": sorted(params),
        "digest": digest,
    }
    buffer = io.BytesIO()
    torch.save(params, buffer)
    dirname = os.path.dirname(filename)
    if dirname:
        os.makedirs(dirname, exist_ok=True)
    with zipfile.ZipFile(filename, "w") as archive:
        _writestr(archive, "header.yaml", yaml.safe_dump(header, sort_keys=True))
        _writestr(archive, "params.pt", buffer.getvalue())
        for name, data in sorted((extras or {}).items()):
            _writestr(archive, name, data)
    return digest

def read_container(filename, kind=None, expected_env_spec=None) -> Container:
    """
    Read and verify a container.

    Raises:
        FileNotFoundError: if the file does not exist
        ContainerFormatError: on format/kind/digest mismatches
        EnvSpecMismatch: if expected_env_spec is given and incompatible
    """
    if not os.path.isfile(filename):
        raise FileNotFoundError(f"Checkpoint {filename} does not exist.")
    try:
        with zipfile.ZipFile(filename, "r") as archive:
            header = yaml.safe_load(archive.read("header.yaml"))
            params = torch.load(io.BytesIO(archive.read("params.pt")), map_location="cpu")
            extras = {name: archive.read(name) for name in archive.namelist()
                      if name not in ("header.yaml", "params.pt")}
    except (zipfile.BadZipFile, KeyError) as ex:
        raise ContainerFormatError(f"{filename} is not a valid container: {ex}")
    if header.get("format_version") != FORMAT_VERSION:
        raise ContainerFormatError(f"{filename}: unsupported format_version {header.get('format_version')}")
    if kind is not None and header.get("kind") != kind:
        raise ContainerFormatError(f"{filename}: expected a '{kind}' container, found '{header.get('kind')}'")
    digest = parameter_digest(*[params[name] for name in sorted(params)])
    if digest != header.get("digest"):
        raise ContainerFormatError(f"{filename}: parameter digest mismatch (file corrupted?)")
    container = Container(header["kind"], header, params, extras)
    if expected_env_spec is not None:
        stored = container.env_spec
        if stored is None or not EnvSpec.from_dict(stored).compatible_with(expected_env_spec):
            raise EnvSpecMismatch(f"{filename} was written for env {stored}, not {dict(expected_env_spec._asdict())}")
    return container

def save_arrays(**arrays) -> bytes:
    buffer = io.BytesIO()
    np.savez(buffer, **arrays)
    return buffer.getvalue()

def load_arrays(data: bytes) -> dict:
    with np.load(io.BytesIO(data)) as npz:
        return {key: npz[key] for key in npz.files}
