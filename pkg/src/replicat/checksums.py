"""File checksums: MD5 and Adler-32, both as lowercase hex."""

import hashlib
import zlib


def adler32_hex(data: bytes) -> str:
    return f"{zlib.adler32(data) & 0xFFFFFFFF:08x}"


def md5_hex(data: bytes) -> str:
    return hashlib.md5(data).hexdigest()


def checksum(data: bytes, algorithm: str) -> str:
    algorithm = algorithm.upper()
    if algorithm == "ADLER32":
        return adler32_hex(data)
    if algorithm == "MD5":
        return md5_hex(data)
    raise ValueError(f"unsupported checksum algorithm: {algorithm}")
