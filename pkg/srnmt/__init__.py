# Numpy toolkit for weakly-recurrent neural machine translation
