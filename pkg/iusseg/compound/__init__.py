__all__ = ['cmpnd']
