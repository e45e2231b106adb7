"""
二进制记录文件的公共封装
布局：magic(8) | version(u32) | body 长度(u64) | body | sha256(body)(32)
所有整数与浮点均为小端序
"""
import hashlib
import struct
from typing import Tuple

from .errors import CorruptRecord, VersionMismatch

_HEADER = struct.Struct('<8sIQ')
_DIGEST_SIZE = 32


def pack_record(magic: bytes, version: int, body: bytes) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic 必须为 8 字节")
    return _HEADER.pack(magic, version, len(body)) + body + hashlib.sha256(body).digest()


def unpack_record(raw: bytes, magic: bytes, version: int) -> bytes:
    """校验头部、长度与摘要，返回 body"""
    if len(raw) < _HEADER.size:
        raise CorruptRecord("记录文件过短，缺少头部")
    got_magic, got_version, length = _HEADER.unpack_from(raw, 0)
    if got_magic != magic:
        raise CorruptRecord(f"记录类型不符: {got_magic!r}")
    if got_version != version:
        raise VersionMismatch(f"记录版本 {got_version} 不受支持，当前版本为 {version}")
    end = _HEADER.size + length
    if len(raw) != end + _DIGEST_SIZE:
        raise CorruptRecord(f"记录长度不符: 期望 {end + _DIGEST_SIZE} 字节，实际 {len(raw)} 字节")
    body = raw[_HEADER.size:end]
    if hashlib.sha256(body).digest() != raw[end:]:
        raise CorruptRecord("记录校验和不匹配")
    return body


class Writer:
    """按顺序拼接小端序字段"""

    def __init__(self):
        self._parts = []

    def u32(self, value: int):
        self._parts.append(struct.pack('<I', value))

    def u64(self, value: int):
        self._parts.append(struct.pack('<Q', value))

    def raw(self, data: bytes):
        self._parts.append(data)

    def text(self, value: str):
        data = value.encode('utf-8')
        self.u32(len(data))
        self._parts.append(data)

    def getvalue(self) -> bytes:
        return b''.join(self._parts)


class Reader:
    """Writer 的逆操作，越界即视为损坏"""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def _take(self, n: int) -> bytes:
        if n < 0 or self._pos + n > len(self._data):
            raise CorruptRecord("记录内容被截断")
        chunk = self._data[self._pos:self._pos + n]
        self._pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack('<I', self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack('<Q', self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def text(self) -> str:
        n = self.u32()
        try:
            return self._take(n).decode('utf-8')
        except UnicodeDecodeError:
            raise CorruptRecord("字符串不是合法的 UTF-8")

    def done(self) -> bool:
        return self._pos == len(self._data)

    def position(self) -> Tuple[int, int]:
        return self._pos, len(self._data)
