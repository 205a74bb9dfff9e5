# The FDSH checkpoint format: encode, decode, and what happens to a
# damaged file.

import numpy as np

from selfheal.trainer import ChecksumError, FormatError, decode_tensors, encode_tensors

rng = np.random.default_rng(0)
tensors = {"W": rng.normal(size=(3, 4)), "b": np.zeros(3)}
blob = encode_tensors(tensors)
print(len(blob), "bytes, header", blob[:5])

back = decode_tensors(blob)
print("bit-exact:", all(back[k].tobytes() == tensors[k].tobytes() for k in tensors))

bad = bytearray(blob)
bad[30] ^= 0x01
try:
    decode_tensors(bytes(bad))
except ChecksumError as e:
    print("flipped bit:", e)

try:
    decode_tensors(blob[:20])
except FormatError as e:
    print("truncated:", e)
