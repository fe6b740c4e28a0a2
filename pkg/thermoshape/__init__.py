"""
ThermoShape - Identificação de tumores por termografia e otimização de forma
"""

__version__ = "1.0.0"
__author__ = "ThermoShape Team"
__description__ = "Reconstrução da geometria de inclusões a partir da temperatura da pele"
