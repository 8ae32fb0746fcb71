import inspect
import sys

system_encoding = sys.getdefaultencoding()

if system_encoding != "utf-8":

    def make_safe(string):
        # replaces any character not representable using the system default encoding with an '?'
        return string.encode(system_encoding, errors="replace").decode(system_encoding)

else:

    def make_safe(string):
        # utf-8 can encode any Unicode code point, so no need to do the round-trip encoding
        return string


def str_to_valid_type(val: str):
    if len(val) == 0:
        return None
    if ',' in val:
        return [str_to_valid_type(v) for v in val.split(',')]
    try:
        val = float(val) if '.' in val or 'e' in val.lower() else int(val)
    except ValueError:
        pass
    finally:
        return val


def get_func_parameters(func):
    return inspect.signature(func).parameters.keys()


def safe_print(msg: str):
    if msg:
        print(make_safe(msg))


class GeoNormError(Exception):

    def __init__(self, message: str = None, data: dict = None):
        super().__init__(message)
        self.data = data

    def get_data(self):
        return self.data


class DimensionError(GeoNormError, ValueError):
    pass


class DomainError(GeoNormError, ValueError):
    pass


class ContractError(GeoNormError, ValueError):
    pass


class TokenIndexError(GeoNormError, IndexError):
    pass


class CorpusError(GeoNormError, OSError):
    pass


class CheckFailure(GeoNormError):

    def __init__(self, message: str = None, data: dict = None):
        if not message:
            message = 'A numerical check exceeded its tolerance. The failing case is attached for replay.'
        super().__init__(message, data)
